//! Connectionist temporal classification: loss, an exhaustive oracle,
//! best-path decoding, and phoneme error rate.
//!
//! Logit matrices are `T×(K+1)`; the last class index `K` is the blank.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// Index of the blank symbol for `num_outputs = K + 1` output classes.
pub fn blank_index(num_outputs: usize) -> usize {
    num_outputs - 1
}

/// Fewest frames that can emit `label`: one per symbol plus a separating
/// blank between equal neighbours.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label(label: &[usize], num_outputs: usize) -> Result<()> {
    let blank = blank_index(num_outputs);
    match label.iter().find(|&&s| s >= blank) {
        Some(s) => Err(Error::Argument(format!(
            "label symbol {s} out of range for {num_outputs} outputs (blank = {blank})"
        ))),
        None => Ok(()),
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Negative log-likelihood of `label` under `logits` and its gradient with
/// respect to the logits (same row-major `frames×num_outputs` layout).
pub fn ctc_loss_and_grad(
    logits: &[f64],
    frames: usize,
    num_outputs: usize,
    label: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if num_outputs < 2 || logits.len() != frames * num_outputs {
        return Err(Error::shape("ctc_loss", &[frames, num_outputs], &[logits.len()]));
    }
    if frames == 0 {
        return Err(Error::Argument("ctc_loss on an empty sequence".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    check_label(label, num_outputs)?;
    let needed = min_frames(label);
    if frames < needed {
        return Err(Error::InfeasibleAlignment { needed, frames });
    }

    let c = num_outputs;
    let blank = blank_index(c);
    let mut lp = vec![0.0; frames * c];
    for t in 0..frames {
        log_softmax_row(&logits[t * c..(t + 1) * c], &mut lp[t * c..(t + 1) * c]);
    }

    // Extended label: blanks interleaved, length 2L+1.
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { label[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * c + ext[s]] };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    // beta[t][s]: log-probability of completing the label from state s at t,
    // excluding the emission at t.
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let emit = |s2: usize| beta[next + s2] + lp[(t + 1) * c + ext[s2]];
            let mut b = emit(s);
            if s + 1 < s_len {
                b = lse2(b, emit(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, emit(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; frames * c];
    for t in 0..frames {
        let row = &mut grad[t * c..(t + 1) * c];
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp[t * c + k].exp();
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                row[ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `label` given a `T×(K+1)` logit matrix.
pub fn ctc_loss(logits: &Tensor<f64>, label: &[usize]) -> Result<f64> {
    let (t, c) = logits.dims2()?;
    ctc_loss_and_grad(logits.data(), t, c, label).map(|(l, _)| l)
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Likelihood of `label` by summing over every frame-level path.
///
/// `probs` is a row-stochastic `T×(K+1)` matrix; limited to `T ≤ 10`.
pub fn ctc_brute_force(probs: &Tensor<f64>, label: &[usize]) -> Result<f64> {
    let (t, c) = probs.dims2()?;
    if t > 10 {
        return Err(Error::Argument(format!(
            "brute-force enumeration refused for {t} frames (limit 10)"
        )));
    }
    check_label(label, c)?;
    let blank = blank_index(c);
    let mut path = vec![0usize; t];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == label {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &k)| probs.data()[i * c + k])
                .product::<f64>();
        }
        // Next path in odometer order.
        let mut i = 0;
        loop {
            if i == t {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (ties go to the lower index), collapse repeats, drop
/// blanks.
pub fn best_path_decode<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (t, c) = logits.dims2()?;
    let path: Vec<usize> = (0..t)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(collapse(&path, blank_index(c)))
}

/// Unit-cost edit distance.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length. May exceed 1.
pub fn per(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Argument(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Argument("total reference length is zero".into()));
    }
    let dist: usize = refs.iter().zip(hyps).map(|(r, h)| levenshtein(r, h)).sum();
    Ok(dist as f64 / total as f64)
}

/// Mean CTC loss over a padded batch, recorded as one graph node.
///
/// `logits[t]` is the `[B×(K+1)]` output at frame `t`; sequence `b` uses
/// frames `0..lengths[b]` and must carry a label.
pub fn ctc_batch_loss<T: Element>(
    g: &mut Graph<T>,
    logits: &[NodeId],
    lengths: &[usize],
    labels: &[&[usize]],
) -> Result<NodeId> {
    let batch = lengths.len();
    if batch == 0 || labels.len() != batch {
        return Err(Error::Argument("ctc batch needs one label per sequence".into()));
    }
    let c = g.shape(*logits.first().ok_or_else(|| Error::Argument("no frames".into()))?)[1];
    if lengths.iter().any(|&l| l > logits.len()) {
        return Err(Error::Argument("sequence longer than the logit stack".into()));
    }
    let mut local: Vec<Vec<T>> = logits.iter().map(|_| vec![T::zero(); batch * c]).collect();
    let mut total = 0.0;
    let inv = 1.0 / batch as f64;
    for b in 0..batch {
        let frames = lengths[b];
        let mut seq = Vec::with_capacity(frames * c);
        for &node in &logits[..frames] {
            seq.extend(g.value(node).row(b).iter().map(|v| v.f64()));
        }
        let (loss, grad) = ctc_loss_and_grad(&seq, frames, c, labels[b])?;
        total += loss;
        for t in 0..frames {
            for k in 0..c {
                local[t][b * c + k] = T::of(grad[t * c + k] * inv);
            }
        }
    }
    let local = local
        .into_iter()
        .map(|d| Tensor::new([batch, c], d))
        .collect::<Result<Vec<_>>>()?;
    g.scalar_fn(logits.to_vec(), T::of(total * inv), local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamSet, Rng};
    use proptest::prelude::*;

    fn probs_from(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn logits_of(p: &Tensor<f64>) -> Tensor<f64> {
        p.map(f64::ln)
    }

    fn random_probs(rng: &mut Rng, t: usize, c: usize) -> Tensor<f64> {
        let logits: Tensor<f64> = rng.gaussian([t, c], 1.5).unwrap();
        logits.softmax_rows().unwrap()
    }

    #[test]
    fn single_frame_single_symbol() {
        let p = probs_from(&[vec![0.2, 0.5, 0.3]]);
        let loss = ctc_loss(&logits_of(&p), &[0]).unwrap();
        assert!((loss - -(0.2f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_enumerated_by_hand() {
        // classes a=0, b=1, blank=2
        let p = probs_from(&[vec![0.5, 0.2, 0.3], vec![0.1, 0.6, 0.3]]);
        let (a1, a2, b1, b2): (f64, f64, f64, f64) = (0.5, 0.1, 0.3, 0.3);
        // paths: "aa", "a-", "-a"
        let expected = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        let loss = ctc_loss(&logits_of(&p), &[0]).unwrap();
        assert!((loss - expected).abs() < 1e-14);
        assert!((ctc_brute_force(&p, &[0]).unwrap() - (-expected).exp()).abs() < 1e-15);
    }

    #[test]
    fn uniform_probabilities_match_oracle() {
        for (t, label) in [(3, vec![0]), (4, vec![0, 1]), (5, vec![1, 1]), (6, vec![2, 0, 2])] {
            let c = 4;
            let p = Tensor::full([t, c], 0.25);
            let loss = ctc_loss(&logits_of(&p), &label).unwrap();
            let oracle = ctc_brute_force(&p, &label).unwrap();
            assert!((-loss - oracle.ln()).abs() < 1e-10, "{t} {label:?}");
        }
    }

    #[test]
    fn infeasible_alignment_is_typed() {
        let p = Tensor::full([2, 3], 1.0 / 3.0);
        match ctc_loss(&logits_of(&p), &[0, 0]) {
            Err(Error::InfeasibleAlignment { needed, frames }) => {
                assert_eq!((needed, frames), (3, 2));
            }
            other => panic!("{other:?}"),
        }
        assert!(ctc_loss(&logits_of(&p), &[2]).is_err(), "blank in label");
    }

    #[test]
    fn brute_force_edge_cases() {
        let mut rng = Rng::new(3);
        let p = random_probs(&mut rng, 3, 3);
        assert_eq!(ctc_brute_force(&p, &[0, 1, 0, 1]).unwrap(), 0.0);
        let all_blank: f64 = (0..3).map(|t| p.data()[t * 3 + 2]).product();
        assert!((ctc_brute_force(&p, &[]).unwrap() - all_blank).abs() < 1e-15);
        assert!((ctc_loss(&logits_of(&p), &[]).unwrap() + all_blank.ln()).abs() < 1e-12);
        let long = Tensor::full([11, 2], 0.5);
        assert!(ctc_brute_force(&long, &[0]).is_err());
    }

    #[test]
    fn probability_mass_over_all_labels_is_at_most_one() {
        let mut rng = Rng::new(77);
        for t in 1..=4 {
            let p = random_probs(&mut rng, t, 3);
            let logits = logits_of(&p);
            let mut total = 0.0;
            // every label over K=2 symbols with length <= t
            for len in 0..=t {
                for code in 0..(1usize << len) {
                    let label: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
                    match ctc_loss(&logits, &label) {
                        Ok(l) => total += (-l).exp(),
                        Err(Error::InfeasibleAlignment { .. }) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
            }
            assert!(total <= 1.0 + 1e-12, "t={t}: {total}");
            assert!((total - 1.0).abs() < 1e-12, "every path collapses to some label");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        for label in [vec![], vec![1], vec![0, 0], vec![2, 0, 1]] {
            let mut params = ParamSet::new();
            params.insert("logits", rng.gaussian([6, 4], 1.0).unwrap()).unwrap();
            let r = grad_check(&params, 1e-5, |g, p| {
                let x = g.param("logits", p.get("logits").unwrap().clone())?;
                let rows: Vec<NodeId> = (0..6)
                    .map(|t| {
                        let sel = Tensor::new([1, 6], (0..6).map(|j| if j == t { 1.0 } else { 0.0 }).collect())?;
                        let s = g.input(sel);
                        g.matmul(s, x)
                    })
                    .collect::<Result<_>>()?;
                ctc_batch_loss(g, &rows, &[6], &[&label])
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{label:?}: {r:?}");
        }
    }

    #[test]
    fn batch_loss_is_mean_of_sequence_losses() {
        let mut rng = Rng::new(12);
        let logits: Vec<Tensor<f64>> = (0..5).map(|_| rng.gaussian([2, 3], 1.0).unwrap()).collect();
        let mut g = Graph::<f64>::new();
        let nodes: Vec<NodeId> = logits.iter().map(|l| g.input(l.clone())).collect();
        let labels: [&[usize]; 2] = [&[0, 1], &[1]];
        let loss = ctc_batch_loss(&mut g, &nodes, &[5, 3], &labels).unwrap();
        let seq = |b: usize, len: usize| {
            let rows: Vec<Vec<f64>> = (0..len).map(|t| logits[t].row(b).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let expected = 0.5 * (ctc_loss(&seq(0, 5), &[0, 1]).unwrap() + ctc_loss(&seq(1, 3), &[1]).unwrap());
        assert!((g.value(loss).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn decode_examples() {
        let blank_rows = Tensor::<f64>::from_rows(&[vec![0.1, 0.2, 0.7], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!(best_path_decode(&blank_rows).unwrap().is_empty());
        // a a - a b b with a=0, b=1, blank=2
        let path = [0, 0, 2, 0, 1, 1];
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| (0..3).map(|j| if j == k { 2.0 } else { 0.0 }).collect())
            .collect();
        let logits = Tensor::<f64>::from_rows(&rows).unwrap();
        assert_eq!(best_path_decode(&logits).unwrap(), vec![0, 0, 1]);
        let ties = Tensor::<f64>::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(best_path_decode(&ties).unwrap(), vec![0]);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<usize>(&[], &[4, 5]), 2);
        assert_eq!(levenshtein(&[4, 5, 6], &[]), 3);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn per_examples() {
        let refs = vec![vec![0, 1], vec![2]];
        assert_eq!(per(&refs, &refs).unwrap(), 0.0);
        assert_eq!(per(&refs, &[vec![], vec![]]).unwrap(), 1.0);
        assert_eq!(per(&refs, &[vec![0], vec![2]]).unwrap(), 1.0 / 3.0);
        assert!(per(&[vec![]], &[vec![1]]).is_err());
        assert!(per(&refs, &[vec![]]).is_err());
    }

    proptest! {
        #[test]
        fn dp_equals_enumeration(seed in 0u64..1_000_000, t in 1usize..=6, len in 0usize..=3) {
            let mut rng = Rng::new(seed);
            let label: Vec<usize> = (0..len).map(|_| rng.below(3)).collect();
            prop_assume!(min_frames(&label) <= t);
            let p = random_probs(&mut rng, t, 4);
            let loss = ctc_loss(&logits_of(&p), &label).unwrap();
            let oracle = ctc_brute_force(&p, &label).unwrap();
            prop_assert!((-loss - oracle.ln()).abs() < 1e-10);
        }

        #[test]
        fn decode_is_blank_free_and_short(seed in 0u64..1_000_000, t in 0usize..20) {
            let logits: Tensor<f64> = Rng::new(seed).gaussian([t, 5], 1.0).unwrap();
            let out = best_path_decode(&logits).unwrap();
            prop_assert!(out.len() <= t);
            prop_assert!(out.iter().all(|&k| k != 4));
            // argmax is invariant under a strictly increasing map
            let warped = logits.map(|v| v.exp() * 3.0 - 1.0);
            prop_assert_eq!(best_path_decode(&warped).unwrap(), out);
        }

        #[test]
        fn levenshtein_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
            c in prop::collection::vec(0u8..4, 0..8),
        ) {
            let (ab, ba) = (levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        }
    }
}
