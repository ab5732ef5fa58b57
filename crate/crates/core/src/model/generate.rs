use super::forward::{forward_audited, ExpertAudit};
use super::params::{Layout, ModelParams};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tokenizer::{resolve_route, Route, EOS};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    /// Softmax sampling at the given temperature (must be positive).
    Temperature(f64),
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Forces a route instead of reading control tokens from the prompt.
    pub route_override: Option<Route>,
    /// Incremental decoding with a key/value cache; otherwise every step
    /// recomputes the full prefix.
    pub use_cache: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 32,
            sampler: Sampler::Greedy,
            seed: 0,
            route_override: None,
            use_cache: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, without the prompt and without a terminating EOS.
    pub tokens: Vec<usize>,
    pub route: Route,
    pub audit: ExpertAudit,
    pub stopped_at_eos: bool,
}

/// Anything that continues a prompt. Evaluation code is written against
/// this so it can run on stub generators.
pub trait Generator: Sync {
    fn generate(&self, prompt: &[usize], options: &GenerateOptions) -> Result<Generation>;
}

impl Generator for ModelParams {
    fn generate(&self, prompt: &[usize], options: &GenerateOptions) -> Result<Generation> {
        generate(self, prompt, options)
    }
}

/// Decodes a continuation of `prompt`. The route is resolved once from the
/// prompt and held fixed for every step.
pub fn generate(params: &ModelParams, prompt: &[usize], options: &GenerateOptions) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Argument("prompt must contain at least one token".into()));
    }
    let cfg = params.config();
    if prompt.len() > cfg.max_seq {
        return Err(Error::Capacity {
            len: prompt.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&bad) = prompt.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "prompt token",
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    if let Sampler::Temperature(t) = options.sampler {
        if !(t > 0.0) {
            return Err(Error::Argument(format!("temperature must be positive, got {t}")));
        }
    }
    let route = options
        .route_override
        .unwrap_or_else(|| resolve_route(prompt, Route::NoThink));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut audit = ExpertAudit::default();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut stopped_at_eos = false;
    let mut cache = options.use_cache.then(|| KvCache::new(&params.layout));
    let mut pending = prompt.len();

    while out.len() < options.max_new && seq.len() < cfg.max_seq {
        let logits = match cache.as_mut() {
            Some(c) => c.step(params, &seq[seq.len() - pending..], route, &mut audit)?,
            None => {
                let all = forward_audited(params, &seq, route, &mut audit)?;
                all.row(seq.len() - 1).to_vec()
            }
        };
        let next = sample(&logits, options.sampler, &mut rng)?;
        if next == EOS {
            stopped_at_eos = true;
            break;
        }
        seq.push(next);
        out.push(next);
        pending = 1;
    }
    Ok(Generation {
        tokens: out,
        route,
        audit,
        stopped_at_eos,
    })
}

fn sample(logits: &[f64], sampler: Sampler, rng: &mut ChaCha8Rng) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "generate" });
    }
    match sampler {
        Sampler::Greedy => Ok(argmax(logits)),
        Sampler::Temperature(t) => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Degenerate(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-layer rotated keys and values of every position seen so far.
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    fn new(layout: &Layout) -> Self {
        let n = layout.layers.len();
        Self {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feeds `tokens` and returns the logits of the last one.
    fn step(
        &mut self,
        params: &ModelParams,
        tokens: &[usize],
        route: Route,
        audit: &mut ExpertAudit,
    ) -> Result<Vec<f64>> {
        let layout = &params.layout;
        let cfg = &layout.config;
        let vals = params.values();
        let seg = |i: usize| vals.segment(i).data();
        let (d, f, rows) = (cfg.d_model, cfg.d_ff, tokens.len());
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let offset = self.len;

        let embed = seg(layout.embed);
        let mut h = Vec::with_capacity(rows * d);
        for &t in tokens {
            h.extend_from_slice(&embed[t * d..(t + 1) * d]);
        }
        for (l, layer) in layout.layers.iter().enumerate() {
            let (x, _) = kernels::rms_norm(&h, seg(layer.ln1), rows);
            let mut q = kernels::matmul_t(&x, seg(layer.wq), rows, d, d);
            let mut k = kernels::matmul_t(&x, seg(layer.wk), rows, d, d);
            let v = kernels::matmul_t(&x, seg(layer.wv), rows, d, d);
            kernels::rope_in_place(&mut q, rows, heads, hd, cfg.rope_base, offset, false);
            kernels::rope_in_place(&mut k, rows, heads, hd, cfg.rope_base, offset, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let tk = offset + rows;
            let (att, _) = kernels::attention(&q, &self.keys[l], &self.values[l], rows, tk, heads, hd, offset);
            let proj = kernels::matmul_t(&att, seg(layer.wo), rows, d, d);
            add_assign(&mut h, &proj);

            let (x2, _) = kernels::rms_norm(&h, seg(layer.ln2), rows);
            let [gate, up, down] = layout.expert(l, route);
            audit.record(l, route, rows);
            let g = kernels::matmul_t(&x2, seg(gate), rows, d, f);
            let u = kernels::matmul_t(&x2, seg(up), rows, d, f);
            let act: Vec<f64> = g.iter().zip(&u).map(|(&gv, &uv)| kernels::silu(gv) * uv).collect();
            let update = kernels::matmul_t(&act, seg(down), rows, f, d);
            add_assign(&mut h, &update);
        }
        self.len += rows;
        let last = &h[(rows - 1) * d..];
        let (hn, _) = kernels::rms_norm(last, seg(layout.final_norm), 1);
        Ok(kernels::matmul_t(&hn, seg(layout.lm_head), 1, d, cfg.vocab_size))
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, PleConfig};
    use crate::tokenizer::{BOS, CTRL_NOTHINK, CTRL_THINK};

    fn model() -> ModelParams {
        let dense = ModelParams::init_dense(&PleConfig::tiny(24), 3).unwrap();
        let mut ple = ModelParams::clone_from_dense(&dense).unwrap();
        // make the experts differ so routes are distinguishable
        let seg = ple.expert_segments(0, Route::Think)[2];
        ple.values_mut().segment_mut(seg).data_mut().iter_mut().for_each(|v| *v *= -3.0);
        ple
    }

    #[test]
    fn cached_and_recomputed_decoding_agree() {
        let m = model();
        let prompt = [BOS, 8, 9, 10, CTRL_THINK];
        for sampler in [Sampler::Greedy, Sampler::Temperature(0.9)] {
            let mut opts = GenerateOptions {
                max_new: 12,
                sampler,
                seed: 4,
                ..Default::default()
            };
            let cached = generate(&m, &prompt, &opts).unwrap();
            opts.use_cache = false;
            let full = generate(&m, &prompt, &opts).unwrap();
            assert_eq!(cached.tokens, full.tokens);
            assert_eq!(cached.route, Route::Think);
        }
    }

    #[test]
    fn cached_logits_match_full_forward() {
        let m = model();
        let seq = [BOS, 8, 9, 10, CTRL_NOTHINK, 11, 12];
        let full = forward(&m, &seq, Route::NoThink).unwrap();
        let mut cache = KvCache::new(&m.layout);
        let mut audit = ExpertAudit::default();
        let first = cache.step(&m, &seq[..5], Route::NoThink, &mut audit).unwrap();
        assert!(first.iter().zip(full.row(4)).all(|(a, b)| (a - b).abs() < 1e-12));
        cache.step(&m, &seq[5..6], Route::NoThink, &mut audit).unwrap();
        let last = cache.step(&m, &seq[6..], Route::NoThink, &mut audit).unwrap();
        assert!(last.iter().zip(full.row(6)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(audit.token_evaluations(), 2 * seq.len());
    }

    #[test]
    fn route_is_fixed_for_the_whole_generation() {
        let m = model();
        let opts = GenerateOptions {
            max_new: 20,
            ..Default::default()
        };
        let g = generate(&m, &[BOS, 8, CTRL_NOTHINK], &opts).unwrap();
        assert_eq!(g.route, Route::NoThink);
        assert!(g.audit.calls.iter().all(|c| c.route == Route::NoThink));
        let forced = GenerateOptions {
            route_override: Some(Route::Think),
            ..opts
        };
        let g = generate(&m, &[BOS, 8, CTRL_NOTHINK], &forced).unwrap();
        assert!(g.audit.calls.iter().all(|c| c.route == Route::Think));
    }

    #[test]
    fn stops_at_capacity_and_rejects_bad_prompts() {
        let m = model();
        let opts = GenerateOptions {
            max_new: 1000,
            ..Default::default()
        };
        let g = generate(&m, &[BOS, 8], &opts).unwrap();
        assert!(g.stopped_at_eos || g.tokens.len() + 2 == 64);
        assert!(generate(&m, &[], &opts).is_err());
        assert!(matches!(generate(&m, &[BOS, 99], &opts), Err(Error::Index { .. })));
        let bad_t = GenerateOptions {
            sampler: Sampler::Temperature(0.0),
            ..Default::default()
        };
        assert!(generate(&m, &[BOS], &bad_t).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
