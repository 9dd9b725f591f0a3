//! The two learnable components: an autoregressive categorical policy over
//! grammar tokens and a per-cell shared-weight mask decoder (the tool).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{render_observation, ActionGrammar, EnvConfig, GridScene, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: [usize; 2],
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: [64, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub hidden: [usize; 2],
    pub embed_dim: usize,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self { hidden: [32, 32], embed_dim: 8 }
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, dims: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("init dims")
}

/// Two-hidden-layer MLP over `[observation ‖ one-hot token prefix]` with one
/// output head per grammar step.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub grammar: ActionGrammar,
    pub env: EnvConfig,
    pub config: PolicyConfig,
}

/// Policy parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct PolicyVars {
    w_obs: Var,
    w_prefix: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    heads: Vec<(Var, Var)>,
}

/// One sampled token sequence with its per-token sampling log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl PolicyNet {
    pub fn new(env: &EnvConfig, config: &PolicyConfig) -> Self {
        Self { grammar: env.grammar(), env: env.clone(), config: config.clone() }
    }

    fn head_names(step: usize) -> (String, String) {
        (format!("policy.head{step}.w"), format!("policy.head{step}.b"))
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> NamedParams {
        let mut rng = rng::stream(seed, "policy-init", &[]);
        let obs = self.env.observation_dim();
        let prefix = self.grammar.prefix_dim();
        let [h1, h2] = self.config.hidden;
        let mut p = NamedParams::new();
        p.insert("policy.l1.w_obs", glorot(&mut rng, obs + prefix, h1, &[obs, h1]));
        p.insert("policy.l1.w_prefix", glorot(&mut rng, obs + prefix, h1, &[prefix, h1]));
        p.insert("policy.l1.b", Tensor::zeros(&[h1]));
        p.insert("policy.l2.w", glorot(&mut rng, h1, h2, &[h1, h2]));
        p.insert("policy.l2.b", Tensor::zeros(&[h2]));
        for (t, &v) in self.grammar.step_vocab.iter().enumerate() {
            let (w, b) = Self::head_names(t);
            p.insert(w, glorot(&mut rng, h2, v, &[h2, v]));
            p.insert(b, Tensor::zeros(&[v]));
        }
        p
    }

    pub fn bind(&self, tape: &mut Tape, params: &NamedParams) -> Result<PolicyVars> {
        let get = |name: &str| params.get(name).ok_or_else(|| Error::usage(format!("missing policy parameter `{name}`")));
        let param = |tape: &mut Tape, name: &str| -> Result<Var> { Ok(tape.param(name, get(name)?)) };
        let w_obs = param(tape, "policy.l1.w_obs")?;
        let w_prefix = param(tape, "policy.l1.w_prefix")?;
        let b1 = param(tape, "policy.l1.b")?;
        let w2 = param(tape, "policy.l2.w")?;
        let b2 = param(tape, "policy.l2.b")?;
        let mut heads = Vec::with_capacity(self.grammar.max_len());
        for t in 0..self.grammar.max_len() {
            let (w, b) = Self::head_names(t);
            heads.push((param(tape, &w)?, param(tape, &b)?));
        }
        Ok(PolicyVars { w_obs, w_prefix, b1, w2, b2, heads })
    }

    /// First-layer contribution of the observation, shape `[h1]`.
    pub fn observation_hidden(&self, tape: &mut Tape, vars: &PolicyVars, scene: &GridScene) -> Result<Var> {
        let obs = render_observation(scene, &self.env);
        let n = obs.len();
        let obs = tape.constant(Tensor::matrix(1, n, obs.into_values())?);
        let h = tape.matmul(obs, vars.w_obs)?;
        tape.reshape(h, vec![self.config.hidden[0]])
    }

    fn prefix_rows(&self, prefixes: &[&[usize]]) -> Tensor {
        let dim = self.grammar.prefix_dim();
        let mut v = vec![0.0; prefixes.len() * dim];
        for (r, prefix) in prefixes.iter().enumerate() {
            for (s, &tok) in prefix.iter().enumerate() {
                v[r * dim + self.grammar.prefix_offset(s) + tok] = 1.0;
            }
        }
        Tensor::matrix(prefixes.len(), dim, v).expect("prefix dims")
    }

    /// Trunk activations for a batch of prefixes, shape `[n, h2]`.
    fn trunk(&self, tape: &mut Tape, vars: &PolicyVars, obs_h: Var, prefixes: &[&[usize]]) -> Result<Var> {
        let rows = tape.constant(self.prefix_rows(prefixes));
        let pre = tape.matmul(rows, vars.w_prefix)?;
        let pre = tape.add(pre, obs_h)?;
        let pre = tape.add(pre, vars.b1)?;
        let h1 = tape.relu(pre)?;
        let pre2 = tape.matmul(h1, vars.w2)?;
        let pre2 = tape.add(pre2, vars.b2)?;
        tape.relu(pre2)
    }

    fn step_log_softmax(&self, tape: &mut Tape, vars: &PolicyVars, trunk: Var, step: usize, temperature: f64) -> Result<Var> {
        let (w, b) = vars.heads[step];
        let logits = tape.matmul(trunk, w)?;
        let logits = tape.add(logits, b)?;
        let logits = if temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / temperature)? };
        tape.log_softmax(logits)
    }

    /// Per-step log-probabilities of each sequence's tokens.
    ///
    /// Returns one `[n]` vector per grammar step, entry `i` being
    /// `ln π(tokens[i][t] | obs, tokens[i][..t])`.
    pub fn sequence_logprobs(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        scene: &GridScene,
        sequences: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let len = self.grammar.max_len();
        for s in sequences {
            if s.len() != len {
                return Err(Error::usage(format!("sequence of length {} for grammar length {len}", s.len())));
            }
            if let Some(t) = (0..len).find(|&t| s[t] >= self.grammar.step_vocab[t]) {
                return Err(Error::usage(format!("token {} outside step {t} vocabulary", s[t])));
            }
        }
        let obs_h = self.observation_hidden(tape, vars, scene)?;
        let n = sequences.len();
        // step-major rows: row t·n + i holds sequence i's prefix before step t
        let prefixes: Vec<&[usize]> = (0..len).flat_map(|t| sequences.iter().map(move |s| &s[..t])).collect();
        let trunk = self.trunk(tape, vars, obs_h, &prefixes)?;
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            let rows = tape.slice_rows(trunk, t * n, n)?;
            let lsm = self.step_log_softmax(tape, vars, rows, t, 1.0)?;
            out.push(tape.gather(lsm, sequences.iter().map(|s| s[t]).collect())?);
        }
        Ok(out)
    }

    /// Per-token log-probabilities of one sequence (no gradient bookkeeping kept).
    pub fn logprobs(&self, params: &NamedParams, scene: &GridScene, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.group_logprobs(params, scene, &[tokens.to_vec()])?.remove(0))
    }

    /// Per-sequence, per-token log-probabilities for several sequences on one scene.
    pub fn group_logprobs(&self, params: &NamedParams, scene: &GridScene, sequences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let per_step = self.sequence_logprobs(&mut tape, &vars, scene, sequences)?;
        Ok((0..sequences.len()).map(|i| per_step.iter().map(|&v| tape.value(v).values()[i]).collect()).collect())
    }

    /// Full step distribution (log-probabilities) after a prefix.
    pub fn step_distribution(&self, params: &NamedParams, scene: &GridScene, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let obs_h = self.observation_hidden(&mut tape, &vars, scene)?;
        let trunk = self.trunk(&mut tape, &vars, obs_h, &[prefix])?;
        let lsm = self.step_log_softmax(&mut tape, &vars, trunk, prefix.len(), 1.0)?;
        Ok(tape.value(lsm).values().to_vec())
    }

    /// `count` independent ancestral samples at `temperature`.
    pub fn sample(
        &self,
        params: &NamedParams,
        scene: &GridScene,
        count: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<SampledSequence>> {
        self.sample_with(params, scene, count, temperature, |_| rng.gen())
    }

    /// One sample per stream; sequence `i` draws only from `rngs[i]`.
    pub fn sample_streams(
        &self,
        params: &NamedParams,
        scene: &GridScene,
        temperature: f64,
        rngs: &mut [rng::StreamRng],
    ) -> Result<Vec<SampledSequence>> {
        self.sample_with(params, scene, rngs.len(), temperature, |i| rngs[i].gen())
    }

    fn sample_with(
        &self,
        params: &NamedParams,
        scene: &GridScene,
        count: usize,
        temperature: f64,
        mut uniform: impl FnMut(usize) -> f64,
    ) -> Result<Vec<SampledSequence>> {
        if !(temperature > 0.0) {
            return Err(Error::usage(format!("temperature must be > 0, got {temperature}")));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let obs_h = self.observation_hidden(&mut tape, &vars, scene)?;
        let mut seqs: Vec<SampledSequence> =
            (0..count).map(|_| SampledSequence { tokens: Vec::new(), logprobs: Vec::new() }).collect();
        for t in 0..self.grammar.max_len() {
            let prefixes: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
            let trunk = self.trunk(&mut tape, &vars, obs_h, &prefixes)?;
            let lsm = self.step_log_softmax(&mut tape, &vars, trunk, t, temperature)?;
            let v = self.grammar.step_vocab[t];
            let lp = tape.value(lsm).values().to_vec();
            for (i, s) in seqs.iter_mut().enumerate() {
                let row = &lp[i * v..(i + 1) * v];
                let tok = sample_categorical(row, uniform(i));
                s.tokens.push(tok);
                s.logprobs.push(row[tok]);
            }
        }
        Ok(seqs)
    }

    /// Argmax decoding (lowest index on ties).
    pub fn greedy(&self, params: &NamedParams, scene: &GridScene) -> Result<SampledSequence> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let obs_h = self.observation_hidden(&mut tape, &vars, scene)?;
        let mut s = SampledSequence { tokens: Vec::new(), logprobs: Vec::new() };
        for t in 0..self.grammar.max_len() {
            let trunk = self.trunk(&mut tape, &vars, obs_h, &[s.tokens.as_slice()])?;
            let lsm = self.step_log_softmax(&mut tape, &vars, trunk, t, 1.0)?;
            let row = tape.value(lsm).values();
            let tok = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            s.tokens.push(tok);
            s.logprobs.push(row[tok]);
        }
        Ok(s)
    }
}

fn sample_categorical(logprobs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return j;
        }
    }
    // rounding left a sliver of mass unassigned; give it to the most likely token
    (0..logprobs.len()).fold(0, |best, j| if logprobs[j] > logprobs[best] { j } else { best })
}

/// Per-cell decoder with weights shared across cells.
///
/// Cell features: own colour one-hot, 3×3 mean-pooled occupancy, global mean
/// occupancy, inside-prompt-box flag; the prompt concept enters through a
/// learned embedding row projected into the first hidden layer.
#[derive(Clone, Debug)]
pub struct ToolNet {
    pub env: EnvConfig,
    pub config: ToolConfig,
}

#[derive(Clone, Debug)]
pub struct ToolVars {
    embed: Var,
    w_feat: Var,
    w_concept: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w_out: Var,
    b_out: Var,
}

impl ToolNet {
    pub fn new(env: &EnvConfig, config: &ToolConfig) -> Self {
        Self { env: env.clone(), config: config.clone() }
    }

    pub fn feature_dim(&self) -> usize {
        3 * (self.env.colors + 1) + 1
    }

    pub fn concept_count(&self) -> usize {
        self.env.colors * 3
    }

    pub fn init(&self, seed: u64) -> NamedParams {
        let mut rng = rng::stream(seed, "tool-init", &[]);
        let f = self.feature_dim();
        let e = self.config.embed_dim;
        let [h1, h2] = self.config.hidden;
        let mut p = NamedParams::new();
        p.insert("tool.embed", glorot(&mut rng, self.concept_count(), e, &[self.concept_count(), e]));
        p.insert("tool.l1.w_feat", glorot(&mut rng, f + e, h1, &[f, h1]));
        p.insert("tool.l1.w_concept", glorot(&mut rng, f + e, h1, &[e, h1]));
        p.insert("tool.l1.b", Tensor::zeros(&[h1]));
        p.insert("tool.l2.w", glorot(&mut rng, h1, h2, &[h1, h2]));
        p.insert("tool.l2.b", Tensor::zeros(&[h2]));
        p.insert("tool.out.w", glorot(&mut rng, h2, 1, &[h2, 1]));
        p.insert("tool.out.b", Tensor::zeros(&[1]));
        p
    }

    pub fn bind(&self, tape: &mut Tape, params: &NamedParams) -> Result<ToolVars> {
        let mut param = |name: &str| -> Result<Var> {
            let t = params.get(name).ok_or_else(|| Error::usage(format!("missing tool parameter `{name}`")))?;
            Ok(tape.param(name, t))
        };
        Ok(ToolVars {
            embed: param("tool.embed")?,
            w_feat: param("tool.l1.w_feat")?,
            w_concept: param("tool.l1.w_concept")?,
            b1: param("tool.l1.b")?,
            w2: param("tool.l2.w")?,
            b2: param("tool.l2.b")?,
            w_out: param("tool.out.w")?,
            b_out: param("tool.out.b")?,
        })
    }

    /// Feature matrix `[H·W, F]`, rows in row-major cell order.
    pub fn features(&self, scene: &GridScene, prompt: &ToolPrompt) -> Tensor {
        let (w, h) = (scene.width, scene.height);
        let ch = self.env.colors + 1;
        let mut occ = vec![0.0; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                let c = scene.color_at(x, y).map_or(0, |c| c + 1);
                occ[(y * w + x) * ch + c] = 1.0;
            }
        }
        let mut global = vec![0.0; ch];
        for cell in occ.chunks(ch) {
            for (g, v) in global.iter_mut().zip(cell) {
                *g += v;
            }
        }
        global.iter_mut().for_each(|g| *g /= (w * h) as f64);

        let f = self.feature_dim();
        let mut out = vec![0.0; w * h * f];
        for y in 0..h {
            for x in 0..w {
                let row = &mut out[(y * w + x) * f..(y * w + x + 1) * f];
                row[..ch].copy_from_slice(&occ[(y * w + x) * ch..(y * w + x + 1) * ch]);
                // 3×3 mean with out-of-grid neighbours counted as background
                let pooled = &mut row[ch..2 * ch];
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            pooled[0] += 1.0 / 9.0;
                        } else {
                            let base = (ny as usize * w + nx as usize) * ch;
                            for c in 0..ch {
                                pooled[c] += occ[base + c] / 9.0;
                            }
                        }
                    }
                }
                row[2 * ch..3 * ch].copy_from_slice(&global);
                row[3 * ch] = if prompt.in_boxes(x, y) { 1.0 } else { 0.0 };
            }
        }
        Tensor::matrix(w * h, f, out).expect("feature dims")
    }

    fn check_prompt(&self, scene: &GridScene, prompt: &ToolPrompt) -> Result<()> {
        if prompt.boxes.is_empty() {
            return Err(Error::usage("tool prompt without boxes"));
        }
        if prompt.color >= self.env.colors {
            return Err(Error::usage(format!("prompt colour {} out of range", prompt.color)));
        }
        for b in &prompt.boxes {
            if b.x1 > b.x2 || b.y1 > b.y2 || b.x2 >= scene.width || b.y2 >= scene.height {
                return Err(Error::usage(format!("prompt box {b:?} outside the grid")));
            }
        }
        Ok(())
    }

    /// Mask logits `[H, W]` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, vars: &ToolVars, scene: &GridScene, prompt: &ToolPrompt) -> Result<Var> {
        self.check_prompt(scene, prompt)?;
        let feats = tape.constant(self.features(scene, prompt));
        let emb = tape.slice_rows(vars.embed, prompt.concept_index(), 1)?;
        let concept_h = tape.matmul(emb, vars.w_concept)?;
        let concept_h = tape.reshape(concept_h, vec![self.config.hidden[0]])?;
        let pre = tape.matmul(feats, vars.w_feat)?;
        let pre = tape.add(pre, concept_h)?;
        let pre = tape.add(pre, vars.b1)?;
        let h1 = tape.relu(pre)?;
        let pre2 = tape.matmul(h1, vars.w2)?;
        let pre2 = tape.add(pre2, vars.b2)?;
        let h2 = tape.relu(pre2)?;
        let out = tape.matmul(h2, vars.w_out)?;
        let out = tape.add(out, vars.b_out)?;
        tape.reshape(out, vec![scene.height, scene.width])
    }

    /// Mask logits without keeping a tape.
    pub fn logits(&self, params: &NamedParams, scene: &GridScene, prompt: &ToolPrompt) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let out = self.forward(&mut tape, &vars, scene, prompt)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_scene, Domain, GrammarKind};
    use crate::grad::finite_diff_check;

    fn env() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let net = PolicyNet::new(&env(), &PolicyConfig::default());
        let a = net.init(1);
        assert_eq!(a, net.init(1));
        assert_ne!(a, net.init(2));
        for (name, t) in a.iter() {
            if name.ends_with(".b") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_logprobs() {
        let e = env();
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let params = net.init(0).zeros_like();
        let scene = generate_scene(3, Domain::Source, &e).unwrap();
        let lp = net.logprobs(&params, &scene, &[1, 2, 3, 4, 5, 6, 0]).unwrap();
        for (l, &v) in lp.iter().zip(&net.grammar.step_vocab) {
            assert!((l + (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn step_distributions_normalize() {
        let e = env();
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let params = net.init(4);
        let scene = generate_scene(9, Domain::Source, &e).unwrap();
        for prefix in [&[][..], &[1, 0, 3][..]] {
            let lp = net.step_distribution(&params, &scene, prefix).unwrap();
            assert!(lp.iter().all(|&l| l <= 0.0));
            assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_logprobs_match_reevaluation_bit_exactly() {
        let e = env();
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let params = net.init(5);
        let scene = generate_scene(2, Domain::Target, &e).unwrap();
        let mut r = rng::stream(1, "t", &[]);
        let samples = net.sample(&params, &scene, 8, 1.0, &mut r).unwrap();
        let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
        let re = net.group_logprobs(&params, &scene, &seqs).unwrap();
        for (s, lp) in samples.iter().zip(&re) {
            assert_eq!(&s.logprobs, lp);
        }
        let mut r2 = rng::stream(1, "t", &[]);
        assert_eq!(samples, net.sample(&params, &scene, 8, 1.0, &mut r2).unwrap());
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let e = env();
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let params = net.init(6);
        let scene = generate_scene(4, Domain::Source, &e).unwrap();
        let greedy = net.greedy(&params, &scene).unwrap();
        let mut r = rng::stream(2, "t", &[]);
        for s in net.sample(&params, &scene, 4, 1e-6, &mut r).unwrap() {
            assert_eq!(s.tokens, greedy.tokens);
        }
    }

    #[test]
    fn out_of_vocabulary_token_is_a_usage_error() {
        let e = env();
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let scene = generate_scene(4, Domain::Source, &e).unwrap();
        let r = net.logprobs(&net.init(0), &scene, &[9, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn uniform_micro_policy_samples_all_sequences_evenly() {
        let e = EnvConfig { grammar: GrammarKind::Micro, ..EnvConfig::micro() };
        let net = PolicyNet::new(&e, &PolicyConfig::default());
        let params = net.init(0).zeros_like();
        let scene = generate_scene(1, Domain::Source, &e).unwrap();
        let mut r = rng::stream(3, "t", &[]);
        let mut counts = [0usize; 36];
        for s in net.sample(&params, &scene, 36_000, 1.0, &mut r).unwrap() {
            counts[s.tokens[0] * 9 + s.tokens[1]] += 1;
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    fn small_tool_env() -> (EnvConfig, ToolConfig) {
        (EnvConfig::micro(), ToolConfig { hidden: [6, 5], embed_dim: 3 })
    }

    #[test]
    fn policy_logprob_gradient_matches_finite_differences() {
        let e = EnvConfig::micro();
        let net = PolicyNet::new(&e, &PolicyConfig { hidden: [5, 4] });
        let params = net.init(8);
        let scene = generate_scene(8, Domain::Source, &e).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, &params).unwrap();
        let lps = net.sequence_logprobs(&mut tape, &vars, &scene, &[vec![1, 4], vec![3, 0]]).unwrap();
        let mut total = tape.sum(lps[0]).unwrap();
        for &v in &lps[1..] {
            let s = tape.sum(v).unwrap();
            total = tape.add(total, s).unwrap();
        }
        let r = finite_diff_check(&tape, total, &params, 1e-5, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn tool_logits_shape_purity_and_gradient() {
        let (e, tc) = small_tool_env();
        let tool = ToolNet::new(&e, &tc);
        let params = tool.init(1);
        let scene = generate_scene(1, Domain::Source, &e).unwrap();
        let g = e.grammar();
        let p = g.parse(&g.tokens_for(&scene, scene.target_ids[0])).unwrap().unwrap();
        let a = tool.logits(&params, &scene, &p).unwrap();
        assert_eq!(a.dims(), &[8, 8]);
        assert_eq!(a, tool.logits(&params, &scene, &p).unwrap());
        let other = ToolPrompt { color: (p.color + 1) % 4, ..p.clone() };
        assert_ne!(a, tool.logits(&params, &scene, &other).unwrap());

        let mut tape = Tape::new();
        let vars = tool.bind(&mut tape, &params).unwrap();
        let out = tool.forward(&mut tape, &vars, &scene, &p).unwrap();
        let s = tape.sum(out).unwrap();
        let r = finite_diff_check(&tape, s, &params, 1e-5, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn default_tool_outputs_full_grid() {
        let e = env();
        let tool = ToolNet::new(&e, &ToolConfig::default());
        let scene = generate_scene(1, Domain::Source, &e).unwrap();
        let p = e.grammar().parse(&e.grammar().tokens_for(&scene, 0)).unwrap().unwrap();
        assert_eq!(tool.logits(&tool.init(0), &scene, &p).unwrap().dims(), &[16, 16]);
    }

    #[test]
    fn tool_is_flip_covariant() {
        let e = env();
        let tool = ToolNet::new(&e, &ToolConfig::default());
        let params = tool.init(3);
        for seed in 0..5 {
            let scene = generate_scene(seed, Domain::Source, &e).unwrap();
            let p = e.grammar().parse(&e.grammar().tokens_for(&scene, scene.target_ids[0])).unwrap().unwrap();
            let flipped = scene.flipped_h();
            let fp = ToolPrompt { boxes: p.boxes.iter().map(|b| b.flipped_h(e.width)).collect(), ..p.clone() };
            let a = tool.logits(&params, &scene, &p).unwrap();
            let b = tool.logits(&params, &flipped, &fp).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let (u, v) = (a.values()[y * 16 + x], b.values()[y * 16 + 15 - x]);
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_prompt_is_rejected() {
        let e = env();
        let tool = ToolNet::new(&e, &ToolConfig::default());
        let scene = generate_scene(1, Domain::Source, &e).unwrap();
        let p = ToolPrompt { color: 0, size: None, boxes: vec![] };
        assert!(matches!(tool.logits(&tool.init(0), &scene, &p), Err(Error::Usage(_))));
    }
}
