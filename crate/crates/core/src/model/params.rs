use super::PleConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};
use crate::tokenizer::Route;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One MLP per layer, shared by both modes.
    Dense,
    /// Two experts per layer, indexed `[no_think, think]`.
    PathLocked,
}

impl Architecture {
    pub fn experts_per_layer(self) -> usize {
        match self {
            Architecture::Dense => 1,
            Architecture::PathLocked => 2,
        }
    }
}

/// Partition label of a parameter segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    /// Shared backbone: embeddings, attention, norms, LM head.
    Shared,
    /// Expert parameters of one route.
    Expert(Route),
    /// The single MLP of a dense model.
    DenseMlp,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::Shared => "alpha",
            Block::Expert(Route::NoThink) => "beta0",
            Block::Expert(Route::Think) => "beta1",
            Block::DenseMlp => "beta",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "alpha" => Ok(Block::Shared),
            "beta0" => Ok(Block::Expert(Route::NoThink)),
            "beta1" => Ok(Block::Expert(Route::Think)),
            "beta" => Ok(Block::DenseMlp),
            other => Err(Error::Format(format!("unknown block label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerSlots {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    /// `[gate, up, down]` per expert.
    pub experts: Vec<[usize; 3]>,
}

/// Segment order of a model's [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub config: PleConfig,
    pub arch: Architecture,
    pub embed: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
    pub lm_head: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn new(config: &PleConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut blocks = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, block: Block| {
            names.push(name);
            shapes.push(shape);
            blocks.push(block);
            names.len() - 1
        };
        let embed = add("embed".into(), vec![v, d], Block::Shared);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = add(format!("layer{l}.ln1"), vec![d], Block::Shared);
            let wq = add(format!("layer{l}.attn.wq"), vec![d, d], Block::Shared);
            let wk = add(format!("layer{l}.attn.wk"), vec![d, d], Block::Shared);
            let wv = add(format!("layer{l}.attn.wv"), vec![d, d], Block::Shared);
            let wo = add(format!("layer{l}.attn.wo"), vec![d, d], Block::Shared);
            let ln2 = add(format!("layer{l}.ln2"), vec![d], Block::Shared);
            let mut experts = Vec::new();
            for e in 0..arch.experts_per_layer() {
                let (prefix, block) = match arch {
                    Architecture::Dense => (format!("layer{l}.mlp"), Block::DenseMlp),
                    Architecture::PathLocked => {
                        let r = Route::from_index(e)?;
                        (format!("layer{l}.expert{e}"), Block::Expert(r))
                    }
                };
                let gate = add(format!("{prefix}.gate"), vec![f, d], block);
                let up = add(format!("{prefix}.up"), vec![f, d], block);
                let down = add(format!("{prefix}.down"), vec![d, f], block);
                experts.push([gate, up, down]);
            }
            layers.push(LayerSlots { ln1, wq, wk, wv, wo, ln2, experts });
        }
        let final_norm = add("final_norm".into(), vec![d], Block::Shared);
        let lm_head = add("lm_head".into(), vec![v, d], Block::Shared);
        Ok(Self {
            config: config.clone(),
            arch,
            embed,
            layers,
            final_norm,
            lm_head,
            names,
            shapes,
            blocks,
        })
    }

    /// Expert slot used by `route` at `layer`. Dense models ignore the route.
    pub fn expert(&self, layer: usize, route: Route) -> [usize; 3] {
        let e = match self.arch {
            Architecture::Dense => 0,
            Architecture::PathLocked => route.index(),
        };
        self.layers[layer].experts[e]
    }

    pub fn matches(&self, values: &ParamVector) -> bool {
        values.names() == self.names.as_slice()
            && values
                .tensors()
                .iter()
                .zip(&self.shapes)
                .all(|(t, s)| t.shape() == s.as_slice())
    }
}

/// Borrowed view of one SwiGLU expert.
#[derive(Clone, Copy, Debug)]
pub struct ExpertMlp<'a> {
    /// `[d_ff × d_model]`
    pub gate: &'a Tensor,
    /// `[d_ff × d_model]`
    pub up: &'a Tensor,
    /// `[d_model × d_ff]`
    pub down: &'a Tensor,
}

/// All learnable parameters of a dense or path-locked model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub(crate) layout: Layout,
    values: ParamVector,
}

impl ModelParams {
    /// Randomly initialised dense source model.
    pub fn init_dense(config: &PleConfig, seed: u64) -> Result<Self> {
        Self::init(config, Architecture::Dense, seed)
    }

    /// Random initialisation: N(0,1) embeddings, N(0, 1/fan_in) projections,
    /// unit norm gains.
    pub fn init(config: &PleConfig, arch: Architecture, seed: u64) -> Result<Self> {
        let layout = Layout::new(config, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = ParamVector::new();
        for (i, (name, shape)) in layout.names.iter().zip(&layout.shapes).enumerate() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![1.0; n]
            } else {
                let std = if i == layout.embed { 1.0 } else { 1.0 / (shape[1] as f64).sqrt() };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            values.push(name.clone(), Tensor::new(shape.clone(), data)?)?;
        }
        Ok(Self { layout, values })
    }

    /// Path-locked model whose two experts per layer are bitwise copies of
    /// the dense source MLP; shared segments are copied unchanged.
    pub fn clone_from_dense(dense: &ModelParams) -> Result<Self> {
        if dense.architecture() != Architecture::Dense {
            return Err(Error::Config("clone_from_dense needs a dense source model".into()));
        }
        let layout = Layout::new(dense.config(), Architecture::PathLocked)?;
        let mut values = ParamVector::new();
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let source_name = source_segment_name(name);
            let t = dense
                .values
                .get(&source_name)
                .ok_or_else(|| Error::Config(format!("dense model lacks `{source_name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("shape mismatch for `{source_name}`")));
            }
            values.push(name.clone(), t.clone())?;
        }
        Ok(Self { layout, values })
    }

    /// Reassembles a model from values in layout order.
    pub fn from_values(config: &PleConfig, arch: Architecture, values: ParamVector) -> Result<Self> {
        let layout = Layout::new(config, arch)?;
        if !layout.matches(&values) {
            return Err(Error::Config("parameter segments do not match the model layout".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn config(&self) -> &PleConfig {
        &self.layout.config
    }

    pub fn architecture(&self) -> Architecture {
        self.layout.arch
    }

    pub fn values(&self) -> &ParamVector {
        &self.values
    }

    /// Mutable access to the raw values; the layout cannot change.
    pub fn values_mut(&mut self) -> &mut ParamVector {
        &mut self.values
    }

    pub fn into_values(self) -> ParamVector {
        self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.numel()
    }

    pub fn block_of(&self, segment: usize) -> Block {
        self.layout.blocks[segment]
    }

    /// Segment indices belonging to `block`, in layout order.
    pub fn segments_in(&self, block: Block) -> Vec<usize> {
        (0..self.layout.blocks.len())
            .filter(|&i| self.layout.blocks[i] == block)
            .collect()
    }

    pub fn segment_names(&self, block: Block) -> Vec<&str> {
        self.segments_in(block)
            .into_iter()
            .map(|i| self.layout.names[i].as_str())
            .collect()
    }

    /// Flat concatenation of one block's values in layout order.
    pub fn block_flat(&self, block: Block) -> Vec<f64> {
        flat_of(&self.values, &self.segments_in(block))
    }

    pub fn expert(&self, layer: usize, route: Route) -> ExpertMlp<'_> {
        let [g, u, d] = self.layout.expert(layer, route);
        ExpertMlp {
            gate: self.values.segment(g),
            up: self.values.segment(u),
            down: self.values.segment(d),
        }
    }

    /// Segment indices `[gate, up, down]` of the expert used by `route` at `layer`.
    pub fn expert_segments(&self, layer: usize, route: Route) -> [usize; 3] {
        self.layout.expert(layer, route)
    }
}

/// Flat values of selected segments of any same-layout vector (e.g. a gradient).
pub(crate) fn flat_of(values: &ParamVector, segments: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &s in segments {
        out.extend_from_slice(values.segment(s).data());
    }
    out
}

fn source_segment_name(name: &str) -> String {
    match name.split_once(".expert") {
        Some((layer, rest)) => {
            // "layer{l}.expert{e}.{kind}" -> "layer{l}.mlp.{kind}"
            let kind = rest.split_once('.').map(|(_, k)| k).unwrap_or(rest);
            format!("{layer}.mlp.{kind}")
        }
        None => name.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PleConfig {
        PleConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 32,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn clone_duplicates_source_mlp_bitwise() {
        let dense = ModelParams::init_dense(&cfg(), 3).unwrap();
        let ple = ModelParams::clone_from_dense(&dense).unwrap();
        for l in 0..2 {
            let (e0, e1) = (ple.expert(l, Route::NoThink), ple.expert(l, Route::Think));
            assert_eq!(e0.gate, e1.gate);
            assert_eq!(e0.up, e1.up);
            assert_eq!(e0.down, e1.down);
            assert_eq!(e0.gate, dense.expert(l, Route::NoThink).gate);
        }
        assert_eq!(ple.block_flat(Block::Expert(Route::NoThink)), ple.block_flat(Block::Expert(Route::Think)));
    }

    #[test]
    fn parameter_count_identity() {
        let dense = ModelParams::init_dense(&cfg(), 0).unwrap();
        let ple = ModelParams::clone_from_dense(&dense).unwrap();
        assert_eq!(ple.param_count(), dense.param_count() + 2 * (3 * 16 * 32));
        assert_eq!(ple.param_count(), dense.param_count() + 2 * cfg().expert_size());
    }

    #[test]
    fn partition_covers_every_segment_once() {
        let ple = ModelParams::clone_from_dense(&ModelParams::init_dense(&cfg(), 0).unwrap()).unwrap();
        let blocks = [Block::Shared, Block::Expert(Route::NoThink), Block::Expert(Route::Think)];
        let total: usize = blocks.iter().map(|&b| ple.segments_in(b).len()).sum();
        assert_eq!(total, ple.values().len());
        for b in &blocks[1..] {
            for name in ple.segment_names(*b) {
                assert!(name.contains(".expert"), "{name}");
            }
        }
        assert!(ple.segments_in(Block::DenseMlp).is_empty());
    }

    #[test]
    fn clone_rejects_path_locked_source() {
        let dense = ModelParams::init_dense(&cfg(), 0).unwrap();
        let ple = ModelParams::clone_from_dense(&dense).unwrap();
        assert!(matches!(ModelParams::clone_from_dense(&ple), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }
}
