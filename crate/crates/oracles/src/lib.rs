//! Slow reference computations for tests.
//!
//! Everything here works by exhaustive enumeration or numerical
//! differentiation over plain `Vec<Vec<f64>>` grids, and deliberately shares
//! no code with the dynamic-programming kernels it is used to check.
//! Grids are `T` rows of `V + 1` log-probabilities with column 0 the blank.

use std::collections::BTreeMap;

pub type Grid = Vec<Vec<f64>>;

/// Calls `f` with every sequence of length `len` over `0..alphabet`.
pub fn for_each_sequence(alphabet: usize, len: usize, mut f: impl FnMut(&[u32])) {
    let mut seq = vec![0u32; len];
    loop {
        f(&seq);
        let mut pos = len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            seq[pos] += 1;
            if (seq[pos] as usize) < alphabet {
                break;
            }
            seq[pos] = 0;
        }
    }
}

/// Removes repeats, then blanks.
pub fn collapse(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &tok in tokens {
        if Some(tok) != prev && tok != 0 {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

fn path_log_prob(grid: &Grid, tokens: &[u32]) -> f64 {
    let mut acc = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        acc += grid[t][tok as usize];
    }
    acc
}

/// Total probability of all token sequences that collapse to `labels`.
pub fn ctc_probability(grid: &Grid, labels: &[u32]) -> f64 {
    let classes = grid[0].len();
    let mut total = 0.0;
    for_each_sequence(classes, grid.len(), |z| {
        if collapse(z) == labels {
            total += path_log_prob(grid, z).exp();
        }
    });
    total
}

/// Per-frame posterior occupancy of each id over paths collapsing to `labels`.
pub fn ctc_occupancy(grid: &Grid, labels: &[u32]) -> Grid {
    let classes = grid[0].len();
    let mut occ = vec![vec![0.0; classes]; grid.len()];
    let mut total = 0.0;
    for_each_sequence(classes, grid.len(), |z| {
        if collapse(z) == labels {
            let p = path_log_prob(grid, z).exp();
            total += p;
            for (t, &tok) in z.iter().enumerate() {
                occ[t][tok as usize] += p;
            }
        }
    });
    for row in &mut occ {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    occ
}

/// Index of each frame's state in the blank-interleaved graph of `labels`.
fn interleaved_states(tokens: &[u32]) -> Vec<usize> {
    let mut states = Vec::with_capacity(tokens.len());
    let mut emitted = 0usize;
    let mut prev: Option<u32> = None;
    for &tok in tokens {
        if tok == 0 {
            states.push(2 * emitted);
        } else {
            if Some(tok) != prev {
                emitted += 1;
            }
            states.push(2 * emitted - 1);
        }
        prev = Some(tok);
    }
    states
}

/// Most probable token sequence collapsing to `labels`.
///
/// Exact ties are broken by comparing the graph-state sequences from the
/// last frame backwards and taking the smaller one, which is what a
/// backtrace preferring the lowest-index predecessor produces.
pub fn ctc_best_path(grid: &Grid, labels: &[u32]) -> Option<(Vec<u32>, f64)> {
    let classes = grid[0].len();
    let mut best: Option<(Vec<u32>, Vec<usize>, f64)> = None;
    for_each_sequence(classes, grid.len(), |z| {
        if collapse(z) != labels {
            return;
        }
        let score = path_log_prob(grid, z);
        let mut states = interleaved_states(z);
        states.reverse();
        let better = match &best {
            None => true,
            Some((_, best_states, best_score)) => {
                score > *best_score || (score == *best_score && states < *best_states)
            }
        };
        if better {
            best = Some((z.to_vec(), states, score));
        }
    });
    best.map(|(z, _, s)| (z, s))
}

/// Exact probability of every distinct collapsed sequence.
pub fn collapse_class_probabilities(grid: &Grid) -> BTreeMap<Vec<u32>, f64> {
    let classes = grid[0].len();
    let mut out: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for_each_sequence(classes, grid.len(), |z| {
        *out.entry(collapse(z)).or_insert(0.0) += path_log_prob(grid, z).exp();
    });
    out
}

/// Role of a frame in a constrained (no intra-word blank) path.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    LeadBlank,
    Piece(usize),
    TrailBlank,
}

/// Checks a token sequence against the no-internal-blank constraint for a
/// label with distinct pieces and returns the per-frame roles.
fn constrained_roles(z: &[u32], label: &[u32]) -> Option<Vec<Role>> {
    if collapse(z) != label {
        return None;
    }
    let first_piece = z.iter().position(|&t| t != 0)?;
    let last_piece = z.iter().rposition(|&t| t != 0)?;
    if z[first_piece..=last_piece].contains(&0) {
        return None;
    }
    let mut roles = Vec::with_capacity(z.len());
    for (t, &tok) in z.iter().enumerate() {
        let role = if t < first_piece {
            Role::LeadBlank
        } else if t > last_piece {
            Role::TrailBlank
        } else {
            Role::Piece(label.iter().position(|&l| l == tok)?)
        };
        roles.push(role);
    }
    Some(roles)
}

/// Transition weight between two consecutive roles, `None` meaning the
/// virtual start before the first frame.
fn constrained_q(prev: Option<Role>, next: Role, horizon: f64, pieces: usize) -> f64 {
    let stay_blank = 1.0 / horizon;
    let leave_blank = (horizon - 1.0) / horizon;
    match (prev, next) {
        (None, Role::LeadBlank) | (Some(Role::LeadBlank), Role::LeadBlank) => stay_blank,
        (None, Role::Piece(0)) | (Some(Role::LeadBlank), Role::Piece(0)) => leave_blank,
        (Some(Role::Piece(i)), Role::Piece(j)) if j == i || j == i + 1 => 0.5,
        (Some(Role::Piece(i)), Role::TrailBlank) if i + 1 == pieces => 0.5,
        (Some(Role::TrailBlank), Role::TrailBlank) => 1.0,
        _ => 0.0,
    }
}

/// Unnormalized constrained score `Q(label)` and its occupancy, by
/// enumerating every token sequence. Requires distinct label pieces.
pub fn constrained_score_and_occupancy(grid: &Grid, label: &[u32]) -> (f64, Grid) {
    let classes = grid[0].len();
    let frames = grid.len();
    let horizon = frames.max(2) as f64;
    let mut occ = vec![vec![0.0; classes]; frames];
    let mut total = 0.0;
    for_each_sequence(classes, frames, |z| {
        let Some(roles) = constrained_roles(z, label) else {
            return;
        };
        let mut weight = 1.0;
        let mut prev = None;
        for (t, &role) in roles.iter().enumerate() {
            weight *= constrained_q(prev, role, horizon, label.len()) * grid[t][z[t] as usize].exp();
            prev = Some(role);
        }
        if weight == 0.0 {
            return;
        }
        total += weight;
        for (t, &tok) in z.iter().enumerate() {
            occ[t][tok as usize] += weight;
        }
    });
    if total > 0.0 {
        for row in &mut occ {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    (total, occ)
}

/// All complete constrained paths for `label` over `frames` frames, as
/// token sequences, with their transition weight product.
pub fn constrained_paths(label: &[u32], vocab_classes: usize, frames: usize) -> Vec<(Vec<u32>, f64)> {
    let horizon = frames.max(2) as f64;
    let mut out = Vec::new();
    for_each_sequence(vocab_classes, frames, |z| {
        if let Some(roles) = constrained_roles(z, label) {
            let mut weight = 1.0;
            let mut prev = None;
            for &role in &roles {
                weight *= constrained_q(prev, role, horizon, label.len());
                prev = Some(role);
            }
            if weight > 0.0 {
                out.push((z.to_vec(), weight));
            }
        }
    });
    out
}

/// Edit-operation counts of one edit script.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Every (S, I, D) breakdown achieved by some minimum-cost edit script,
/// found by exploring all scripts without memoization.
pub fn minimal_edit_scripts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditCounts> {
    fn walk<T: PartialEq>(r: &[T], h: &[T], acc: EditCounts, out: &mut Vec<EditCounts>) {
        if r.is_empty() && h.is_empty() {
            out.push(acc);
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let mut next = acc;
            if r[0] != h[0] {
                next.substitutions += 1;
            }
            walk(&r[1..], &h[1..], next, out);
        }
        if !h.is_empty() {
            walk(r, &h[1..], EditCounts { insertions: acc.insertions + 1, ..acc }, out);
        }
        if !r.is_empty() {
            walk(&r[1..], h, EditCounts { deletions: acc.deletions + 1, ..acc }, out);
        }
    }
    let mut all = Vec::new();
    walk(
        reference,
        hypothesis,
        EditCounts { substitutions: 0, insertions: 0, deletions: 0 },
        &mut all,
    );
    let best = all.iter().map(EditCounts::total).min().unwrap_or(0);
    let mut minimal: Vec<EditCounts> = all.into_iter().filter(|c| c.total() == best).collect();
    minimal.sort();
    minimal.dedup();
    minimal
}

/// Central finite-difference derivative of `f` along coordinate `index`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], index: usize, step: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[index] = x[index] + step;
    let plus = f(&probe);
    probe[index] = x[index] - step;
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}

/// Relative error with a small absolute floor on the scale so exact zeros
/// compare sensibly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / scale
}

/// Row-wise log-softmax of arbitrary scores.
pub fn log_softmax_rows(logits: &Grid) -> Grid {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v - norm).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_all_sequences() {
        let mut count = 0;
        for_each_sequence(3, 4, |_| count += 1);
        assert_eq!(count, 81);
    }

    #[test]
    fn constrained_paths_for_two_pieces_over_three_frames() {
        let paths: Vec<Vec<u32>> = constrained_paths(&[1, 2], 3, 3).into_iter().map(|(z, _)| z).collect();
        let mut expected = vec![vec![0, 1, 2], vec![1, 1, 2], vec![1, 2, 2], vec![1, 2, 0]];
        expected.sort();
        let mut got = paths;
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn edit_scripts_for_single_substitution() {
        let counts = minimal_edit_scripts(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!(counts, vec![EditCounts { substitutions: 1, insertions: 0, deletions: 0 }]);
    }
}
