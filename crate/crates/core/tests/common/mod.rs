//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's scoring or policy code: n-grams are
//! re-extracted from whitespace-split strings, vectors are dense over an
//! explicit n-gram list, and the log-linear policy is re-derived from its
//! documented parameter layout.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

pub fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

/// Image reference sets as plain strings.
pub struct OracleCorpus {
    pub images: Vec<Vec<Vec<String>>>,
}

impl OracleCorpus {
    pub fn new(images: &[&[&str]]) -> Self {
        Self {
            images: images.iter().map(|refs| refs.iter().map(|r| words(r)).collect()).collect(),
        }
    }

    pub fn df(&self, gram: &str, n: usize) -> usize {
        self.images
            .iter()
            .filter(|refs| refs.iter().any(|r| grams(r, n).iter().any(|g| g == gram)))
            .count()
    }

    pub fn idf(&self, gram: &str, n: usize) -> f64 {
        (self.images.len() as f64 / self.df(gram, n).max(1) as f64).ln()
    }

    /// Weight of one n-gram in one caption.
    pub fn weight(&self, caption: &[String], gram: &str, n: usize) -> f64 {
        let all = grams(caption, n);
        if all.is_empty() {
            return 0.0;
        }
        let count = all.iter().filter(|g| *g == gram).count();
        count as f64 / all.len() as f64 * self.idf(gram, n)
    }

    /// Dense weight vector of `caption` over `basis`.
    pub fn vector(&self, caption: &[String], basis: &[String], n: usize) -> Vec<f64> {
        basis.iter().map(|g| self.weight(caption, g, n)).collect()
    }

    /// CIDEr-D by explicit vectors, cosines and penalty.
    pub fn cider_d(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        let mut total = 0.0;
        for r in refs {
            let delta = cand.len() as f64 - r.len() as f64;
            let penalty = (-delta * delta / 72.0).exp();
            for n in 1..=4 {
                let basis: Vec<String> = grams(cand, n)
                    .into_iter()
                    .chain(grams(r, n))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let vc = self.vector(cand, &basis, n);
                let vr = self.vector(r, &basis, n);
                let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc.iter().zip(&vr).map(|(c, r)| c.min(*r) * r).sum();
                total += dot / (nc * nr) * penalty;
            }
        }
        total / (4.0 * refs.len() as f64) * 10.0
    }

    fn norm(&self, caption: &[String], n: usize) -> f64 {
        let basis: BTreeSet<String> = grams(caption, n).into_iter().collect();
        basis
            .iter()
            .map(|g| self.weight(caption, g, n).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Flags and local increments, word by word.
    pub fn ld(&self, cand: &[String], refs: &[Vec<String>], lambda: f64, eta: f64) -> (Vec<bool>, Vec<f64>) {
        let len = cand.len();
        let mut flags = Vec::with_capacity(len);
        let mut incs = Vec::with_capacity(len);
        for t in 0..len {
            let mut qualifying: BTreeMap<(usize, String), ()> = BTreeMap::new();
            for n in 2..=4usize {
                for start in 0..len {
                    if start + n > len || !(start..start + n).contains(&t) {
                        continue;
                    }
                    let g = cand[start..start + n].join(" ");
                    if self.weight(cand, &g, n) > lambda {
                        qualifying.insert((n, g), ());
                    }
                }
            }
            let flagged = self.weight(cand, &cand[t], 1) > eta && !qualifying.is_empty();
            flags.push(flagged);
            if !flagged {
                incs.push(0.0);
                continue;
            }
            let mut inc = 0.0;
            for (n, g) in qualifying.keys() {
                let gc = self.weight(cand, g, *n);
                let nc = self.norm(cand, *n);
                let mut s = 0.0;
                for r in refs {
                    let gr = self.weight(r, g, *n);
                    let nr = self.norm(r, *n);
                    if gr > 0.0 && nr > 0.0 {
                        s += gc.min(gr) * gr / (nc * nr);
                    }
                }
                inc += s / refs.len() as f64;
            }
            incs.push(inc);
        }
        (flags, incs)
    }
}

/// Shape of a log-linear policy: `vocab` includes the end token at id 0.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub vocab: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl Shape {
    pub fn width(&self) -> usize {
        self.dim + self.vocab + self.max_len + 1
    }

    pub fn params(&self) -> usize {
        self.vocab * self.width()
    }

    /// Next-token distribution with the end token masked on the first step.
    pub fn probs(&self, theta: &[Complex64], ctx: &[f64], prefix: &[usize]) -> Vec<Complex64> {
        let w = self.width();
        let prev = prefix.last().copied().unwrap_or(0);
        let pos = prefix.len();
        let z: Vec<Complex64> = (0..self.vocab)
            .map(|k| {
                let row = &theta[k * w..(k + 1) * w];
                let mut s = Complex64::new(0.0, 0.0);
                for (j, x) in ctx.iter().enumerate() {
                    s += row[j] * *x;
                }
                s + row[self.dim + prev] + row[self.dim + self.vocab + pos] + row[w - 1]
            })
            .collect();
        let allowed = |k: usize| !(prefix.is_empty() && k == 0);
        let shift = (0..self.vocab).filter(|&k| allowed(k)).map(|k| z[k].re).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<Complex64> = (0..self.vocab)
            .map(|k| if allowed(k) { (z[k] - shift).exp() } else { Complex64::new(0.0, 0.0) })
            .collect();
        let sum: Complex64 = e.iter().sum();
        e.into_iter().map(|x| x / sum).collect()
    }

    /// Probability of a complete action sequence.
    pub fn seq_prob(&self, theta: &[Complex64], ctx: &[f64], actions: &[usize]) -> Complex64 {
        let mut p = Complex64::new(1.0, 0.0);
        for t in 0..actions.len() {
            p *= self.probs(theta, ctx, &actions[..t])[actions[t]];
        }
        p
    }

    pub fn seq_log_prob(&self, theta: &[f64], ctx: &[f64], actions: &[usize]) -> f64 {
        let theta: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        (0..actions.len())
            .map(|t| self.probs(&theta, ctx, &actions[..t])[actions[t]].re.ln())
            .sum()
    }

    /// Complex-step derivative of `f` at `theta`.
    pub fn complex_step<F>(&self, theta: &[f64], f: F) -> Vec<f64>
    where
        F: Fn(&[Complex64]) -> Complex64,
    {
        let h = 1e-30;
        let mut z: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        (0..theta.len())
            .map(|j| {
                z[j].im = h;
                let d = f(&z).im / h;
                z[j].im = 0.0;
                d
            })
            .collect()
    }

    /// Every action sequence the policy can emit, in lexicographic order.
    pub fn all_sequences(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack: Vec<Vec<usize>> = (1..self.vocab).map(|a| vec![a]).collect();
        stack.reverse();
        while let Some(seq) = stack.pop() {
            if seq.last() == Some(&0) || seq.len() == self.max_len {
                out.push(seq);
                continue;
            }
            for a in (0..self.vocab).rev() {
                let mut next = seq.clone();
                next.push(a);
                stack.push(next);
            }
        }
        out.sort();
        out
    }
}

/// Brute-force pessimistic rank of image `i` for caption `i`.
pub fn brute_ranks(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    (0..n)
        .map(|i| {
            let mut rank = 1;
            for j in 0..n {
                if j != i && !(scores[i][j] < scores[i][i]) {
                    rank += 1;
                }
            }
            rank
        })
        .collect()
}
