//! Caption policies `p(c | I; θ)` over a closed vocabulary.
//!
//! A policy produces next-token logits from an image context vector and the
//! tokens generated so far. Generation stops at the end-of-sentence token or
//! after `max_len` tokens. The end token is masked at the first step, so
//! every caption has at least one word.
//!
//! An *action sequence* is the caption's token ids followed by
//! [`EOS`] when the caption ended before `max_len`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Caption;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// End-of-sentence token; doubles as the "previous token" at step 0.
pub const EOS: TokenId = 0;
pub const EOS_WORD: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(EOS_WORD) {
            return Err(Error::InvalidConfig("vocabulary must start with the end token".into()));
        }
        let index: HashMap<String, TokenId> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::InvalidConfig("vocabulary contains duplicate words".into()));
        }
        Ok(Vocabulary { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Id 0 is [`EOS`]; `words` get ids 1.. in order. Duplicates are dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: vec![EOS_WORD.to_owned()],
            index: HashMap::new(),
        };
        vocab.index.insert(EOS_WORD.to_owned(), EOS);
        for w in words {
            let w = w.into();
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.words.len());
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// Number of ids, including [`EOS`].
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        match self.index.get(word) {
            Some(&id) if id != EOS => Ok(id),
            _ => Err(Error::UnknownToken(word.to_owned())),
        }
    }

    pub fn encode(&self, caption: &Caption) -> Result<Vec<TokenId>> {
        caption.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Words of `tokens`, skipping [`EOS`].
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Caption> {
        let words: Vec<&str> = tokens.iter().filter(|&&t| t != EOS).map(|&t| self.word(t)).collect();
        Caption::from_tokens(&words)
    }
}

/// A differentiable next-token model.
pub trait SequencePolicy: Sync {
    fn vocab(&self) -> &Vocabulary;
    fn max_len(&self) -> usize;
    fn context_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Raw next-token logits for `prefix` (which never contains [`EOS`]).
    fn logits(&self, context: &[f64], prefix: &[TokenId]) -> Vec<f64>;

    /// Accumulates `scale · (∂logits/∂θ)ᵀ · dlogits` into `grad`.
    fn backprop_logits(&self, context: &[f64], prefix: &[TokenId], dlogits: &[f64], scale: f64, grad: &mut [f64]);

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Next-token distribution with the end token masked at step 0.
pub fn next_token_probs<P: SequencePolicy + ?Sized>(policy: &P, context: &[f64], prefix: &[TokenId]) -> Vec<f64> {
    let logits = policy.logits(context, prefix);
    masked_softmax(&logits, prefix.is_empty())
}

fn masked_softmax(logits: &[f64], mask_eos: bool) -> Vec<f64> {
    let allowed = |k: usize| !(mask_eos && k == EOS);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| allowed(*k))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, &z)| if allowed(k) { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

/// A generated caption with the log-probability of each action.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// One entry per action, including the end token when present.
    pub step_log_probs: Vec<f64>,
    pub ended: bool,
}

impl Rollout {
    pub fn actions(&self) -> Vec<TokenId> {
        let mut a = self.tokens.clone();
        if self.ended {
            a.push(EOS);
        }
        a
    }

    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.step_log_probs.len()
    }

    pub fn caption(&self, vocab: &Vocabulary) -> Caption {
        vocab
            .decode(&self.tokens)
            .expect("policy rollouts contain at least one word")
    }
}

/// The action sequence for a caption of token ids.
pub fn actions_for(tokens: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let mut a: Vec<TokenId> = tokens.iter().copied().take(max_len).collect();
    if a.len() < max_len {
        a.push(EOS);
    }
    a
}

fn rollout_with<P, F>(policy: &P, context: &[f64], mut choose: F) -> Rollout
where
    P: SequencePolicy + ?Sized,
    F: FnMut(&[f64]) -> TokenId,
{
    let mut tokens = Vec::new();
    let mut step_log_probs = Vec::new();
    let mut ended = false;
    while tokens.len() < policy.max_len() {
        let probs = next_token_probs(policy, context, &tokens);
        let tok = choose(&probs);
        step_log_probs.push(probs[tok].ln());
        if tok == EOS {
            ended = true;
            break;
        }
        tokens.push(tok);
    }
    Rollout {
        tokens,
        step_log_probs,
        ended,
    }
}

/// Ancestral sampling.
pub fn sample<P: SequencePolicy + ?Sized, R: Rng + ?Sized>(policy: &P, context: &[f64], rng: &mut R) -> Rollout {
    rollout_with(policy, context, |probs| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = EOS;
        for (k, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
        last
    })
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<P: SequencePolicy + ?Sized>(policy: &P, context: &[f64]) -> Rollout {
    rollout_with(policy, context, argmax)
}

/// Length-normalized score used to rank beam hypotheses.
pub fn normalized_score(rollout: &Rollout) -> f64 {
    rollout.log_prob() / rollout.steps() as f64
}

/// Beam search. At every step the `beam_size` best expansions by cumulative
/// log-probability are kept; expansions ending in [`EOS`] leave the beam as
/// finished hypotheses. The result maximizes the per-action mean
/// log-probability over finished hypotheses. Ties go to the
/// lexicographically smallest action sequence.
pub fn beam_decode<P: SequencePolicy + ?Sized>(policy: &P, context: &[f64], beam_size: usize) -> Rollout {
    assert!(beam_size >= 1, "beam size must be at least 1");
    struct Hyp {
        tokens: Vec<TokenId>,
        step_log_probs: Vec<f64>,
        log_prob: f64,
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        step_log_probs: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Rollout> = Vec::new();
    for _ in 0..policy.max_len() {
        let mut expansions: Vec<(Hyp, bool)> = Vec::new();
        for hyp in &live {
            let probs = next_token_probs(policy, context, &hyp.tokens);
            for (tok, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                let mut steps = hyp.step_log_probs.clone();
                steps.push(p.ln());
                let is_end = tok == EOS;
                if !is_end {
                    tokens.push(tok);
                }
                expansions.push((
                    Hyp {
                        tokens,
                        step_log_probs: steps,
                        log_prob: hyp.log_prob + p.ln(),
                    },
                    is_end,
                ));
            }
        }
        expansions.sort_by(|(a, a_end), (b, b_end)| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| action_key(&a.tokens, *a_end).cmp(&action_key(&b.tokens, *b_end)))
        });
        expansions.truncate(beam_size);
        live.clear();
        for (hyp, is_end) in expansions {
            if is_end {
                finished.push(Rollout {
                    tokens: hyp.tokens,
                    step_log_probs: hyp.step_log_probs,
                    ended: true,
                });
            } else {
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| Rollout {
        tokens: h.tokens,
        step_log_probs: h.step_log_probs,
        ended: false,
    }));
    finished
        .into_iter()
        .min_by(|a, b| {
            normalized_score(b)
                .total_cmp(&normalized_score(a))
                .then_with(|| a.actions().cmp(&b.actions()))
        })
        .expect("beam search keeps at least one hypothesis")
}

fn action_key(tokens: &[TokenId], ended: bool) -> Vec<TokenId> {
    let mut k = tokens.to_vec();
    if ended {
        k.push(EOS);
    }
    k
}

/// `log p(c | context)` for a caption given as token ids (without [`EOS`]).
/// Captions that the policy cannot produce get `-inf`.
pub fn sequence_log_prob<P: SequencePolicy + ?Sized>(policy: &P, context: &[f64], tokens: &[TokenId]) -> f64 {
    if tokens.is_empty() || tokens.len() > policy.max_len() || tokens.contains(&EOS) {
        return f64::NEG_INFINITY;
    }
    let actions = actions_for(tokens, policy.max_len());
    let mut total = 0.0;
    for (t, &a) in actions.iter().enumerate() {
        total += next_token_probs(policy, context, &actions[..t])[a].ln();
    }
    total
}

/// `log p(caption | context)` for a word caption.
pub fn caption_log_prob<P: SequencePolicy + ?Sized>(policy: &P, context: &[f64], caption: &Caption) -> Result<f64> {
    let tokens = policy.vocab().encode(caption)?;
    Ok(sequence_log_prob(policy, context, &tokens))
}

/// `Σ_t weights[t] · ∇_θ log p(actions[t] | actions[..t])`, accumulated into `grad`.
pub fn accumulate_weighted_score<P: SequencePolicy + ?Sized>(
    policy: &P,
    context: &[f64],
    actions: &[TokenId],
    weights: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(actions.len(), weights.len());
    for (t, (&a, &w)) in actions.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let prefix = &actions[..t];
        let probs = next_token_probs(policy, context, prefix);
        let mut dlogits: Vec<f64> = probs.iter().map(|p| -p).collect();
        dlogits[a] += 1.0;
        policy.backprop_logits(context, prefix, &dlogits, w, grad);
    }
}

/// `∇_θ log p(action | prefix)`.
pub fn step_log_prob_gradient<P: SequencePolicy + ?Sized>(
    policy: &P,
    context: &[f64],
    prefix: &[TokenId],
    action: TokenId,
) -> Vec<f64> {
    let mut actions = prefix.to_vec();
    actions.push(action);
    let mut weights = vec![0.0; prefix.len()];
    weights.push(1.0);
    let mut grad = vec![0.0; policy.num_params()];
    accumulate_weighted_score(policy, context, &actions, &weights, &mut grad);
    grad
}

/// Log-linear toy captioner: logits are a linear function of the image
/// context, a one-hot of the previous token, a one-hot of the position and
/// a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    vocab: Vocabulary,
    context_dim: usize,
    max_len: usize,
    params: Vec<f64>,
}

impl LinearPolicy {
    pub fn zeros(vocab: Vocabulary, context_dim: usize, max_len: usize) -> Self {
        assert!(max_len >= 1, "max_len must be at least 1");
        let features = context_dim + vocab.len() + max_len + 1;
        let params = vec![0.0; vocab.len() * features];
        Self {
            vocab,
            context_dim,
            max_len,
            params,
        }
    }

    pub fn with_params(vocab: Vocabulary, context_dim: usize, max_len: usize, params: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(vocab, context_dim, max_len);
        if params.len() != p.params.len() {
            return Err(Error::InvalidConfig(format!(
                "policy expects {} parameters, got {}",
                p.params.len(),
                params.len()
            )));
        }
        p.params = params;
        Ok(p)
    }

    /// Width of the feature vector.
    pub fn features(&self) -> usize {
        self.context_dim + self.vocab.len() + self.max_len + 1
    }

    fn prev_offset(&self) -> usize {
        self.context_dim
    }

    fn pos_offset(&self) -> usize {
        self.context_dim + self.vocab.len()
    }

    fn bias_offset(&self) -> usize {
        self.features() - 1
    }

    /// Flat index of the weight from feature `feature` to token `token`.
    pub fn index(&self, token: TokenId, feature: usize) -> usize {
        token * self.features() + feature
    }

    pub fn context_index(&self, token: TokenId, dim: usize) -> usize {
        self.index(token, dim)
    }

    pub fn prev_index(&self, token: TokenId, prev: TokenId) -> usize {
        self.index(token, self.prev_offset() + prev)
    }

    pub fn position_index(&self, token: TokenId, position: usize) -> usize {
        self.index(token, self.pos_offset() + position)
    }

    pub fn bias_index(&self, token: TokenId) -> usize {
        self.index(token, self.bias_offset())
    }

    fn prev_and_position(prefix: &[TokenId]) -> (TokenId, usize) {
        (prefix.last().copied().unwrap_or(EOS), prefix.len())
    }
}

impl SequencePolicy for LinearPolicy {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, context: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        debug_assert_eq!(context.len(), self.context_dim);
        let (prev, pos) = Self::prev_and_position(prefix);
        let width = self.features();
        (0..self.vocab.len())
            .map(|k| {
                let row = &self.params[k * width..(k + 1) * width];
                let mut z = 0.0;
                for (w, x) in row[..self.context_dim].iter().zip(context) {
                    z += w * x;
                }
                z + row[self.prev_offset() + prev] + row[self.pos_offset() + pos.min(self.max_len - 1)] + row[self.bias_offset()]
            })
            .collect()
    }

    fn backprop_logits(&self, context: &[f64], prefix: &[TokenId], dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        let (prev, pos) = Self::prev_and_position(prefix);
        let width = self.features();
        for (k, &d) in dlogits.iter().enumerate() {
            let g = scale * d;
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[k * width..(k + 1) * width];
            for (r, x) in row[..self.context_dim].iter_mut().zip(context) {
                *r += g * x;
            }
            row[self.prev_offset() + prev] += g;
            row[self.pos_offset() + pos.min(self.max_len - 1)] += g;
            row[self.bias_offset()] += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("w{i}")))
    }

    fn random_policy(seed: u64, words: usize, dim: usize, max_len: usize) -> LinearPolicy {
        let mut p = LinearPolicy::zeros(vocab(words), dim, max_len);
        let mut rng = stream(seed, "test-policy", &[]);
        for w in p.params_mut() {
            *w = rng.random_range(-1.5..1.5);
        }
        p
    }

    #[test]
    fn probabilities_normalize() {
        let p = random_policy(1, 4, 3, 3);
        let ctx = [0.3, -1.0, 2.0];
        for prefix in [vec![], vec![1], vec![2, 3]] {
            let probs = next_token_probs(&p, &ctx, &prefix);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if prefix.is_empty() {
                assert_eq!(probs[EOS], 0.0);
            }
        }
    }

    #[test]
    fn point_mass_policy_is_deterministic() {
        let mut p = LinearPolicy::zeros(vocab(3), 1, 3);
        // Always emit w1 then stop.
        let b1 = p.bias_index(1);
        p.params_mut()[b1] = 60.0;
        let stop = p.prev_index(EOS, 1);
        p.params_mut()[stop] = 200.0;
        let mut rng = stream(0, "pm", &[]);
        let first = sample(&p, &[0.0], &mut rng);
        for _ in 0..20 {
            assert_eq!(sample(&p, &[0.0], &mut rng).tokens, first.tokens);
        }
        assert_eq!(first.tokens, vec![1]);
        assert!(first.ended);
        assert_eq!(greedy_decode(&p, &[0.0]).tokens, first.tokens);
    }

    #[test]
    fn rollout_log_probs_sum_to_sequence_log_prob() {
        let p = random_policy(3, 3, 2, 4);
        let ctx = [0.5, -0.5];
        let mut rng = stream(3, "lp", &[]);
        for _ in 0..50 {
            let r = sample(&p, &ctx, &mut rng);
            let direct = sequence_log_prob(&p, &ctx, &r.tokens);
            assert!((r.log_prob() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_hand_trace() {
        // Two words, max_len 2; logits set so that step 0 prefers w2 and
        // step 1 prefers stopping.
        let mut p = LinearPolicy::zeros(vocab(2), 1, 2);
        let i = p.position_index(2, 0);
        p.params_mut()[i] = 1.0;
        let j = p.position_index(EOS, 1);
        p.params_mut()[j] = 0.5;
        let r = greedy_decode(&p, &[0.0]);
        assert_eq!(r.tokens, vec![2]);
        assert!(r.ended);
        // step 0: softmax over {w1: 0, w2: 1}; step 1: {eos: .5, w1: 0, w2: 0}.
        let p0 = 1f64.exp() / (1.0 + 1f64.exp());
        let p1 = 0.5f64.exp() / (0.5f64.exp() + 2.0);
        assert!((r.log_prob() - (p0.ln() + p1.ln())).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_take_lowest_id() {
        let p = LinearPolicy::zeros(vocab(3), 1, 1);
        assert_eq!(greedy_decode(&p, &[0.0]).tokens, vec![1]);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20 {
            let p = random_policy(seed, 4, 2, 4);
            let ctx = [1.0, -0.3];
            assert_eq!(beam_decode(&p, &ctx, 1), greedy_decode(&p, &ctx));
        }
    }

    #[test]
    fn unknown_words_rejected() {
        let v = vocab(2);
        let c = Caption::new("w0 zebra").unwrap();
        assert!(matches!(v.encode(&c), Err(Error::UnknownToken(w)) if w == "zebra"));
        assert!(v.id(EOS_WORD).is_err());
    }

    #[test]
    fn vocabulary_serde_rebuilds_index() {
        let v = vocab(3);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("w2").unwrap(), 3);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }
}
