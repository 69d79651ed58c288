//! The learnable parameters as a tree generic over the leaf type, so the
//! same structure carries tensors, tape handles, gradients or optimizer
//! moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::SwinConfig;
use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// Mapping and in-place traversal over every leaf, with dotted names.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<Self::Mapped<Q>, E>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearW<P> {
    pub weight: P,
    pub bias: Option<P>,
}

impl<P> ParamTree<P> for LinearW<P> {
    type Mapped<Q> = LinearW<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<LinearW<Q>, E> {
        Ok(LinearW {
            weight: f(&join(prefix, "weight"), &self.weight)?,
            bias: match &self.bias {
                Some(b) => Some(f(&join(prefix, "bias"), b)?),
                None => None,
            },
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = self.bias.as_ref() {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormW<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> ParamTree<P> for NormW<P> {
    type Mapped<Q> = NormW<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<NormW<Q>, E> {
        Ok(NormW { gain: f(&join(prefix, "gain"), &self.gain)?, bias: f(&join(prefix, "bias"), &self.bias)? })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// One transformer block: pre-norm windowed attention and a GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockW<P> {
    pub norm1: NormW<P>,
    pub qkv: LinearW<P>,
    /// `[(2M-1)^2, heads]` table, present when relative bias is enabled.
    pub rel_bias: Option<P>,
    pub proj: LinearW<P>,
    pub norm2: NormW<P>,
    pub fc1: LinearW<P>,
    pub fc2: LinearW<P>,
}

impl<P> ParamTree<P> for BlockW<P> {
    type Mapped<Q> = BlockW<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<BlockW<Q>, E> {
        Ok(BlockW {
            norm1: self.norm1.try_map(&join(prefix, "norm1"), f)?,
            qkv: self.qkv.try_map(&join(prefix, "qkv"), f)?,
            rel_bias: match &self.rel_bias {
                Some(t) => Some(f(&join(prefix, "rel_bias"), t)?),
                None => None,
            },
            proj: self.proj.try_map(&join(prefix, "proj"), f)?,
            norm2: self.norm2.try_map(&join(prefix, "norm2"), f)?,
            fc1: self.fc1.try_map(&join(prefix, "fc1"), f)?,
            fc2: self.fc2.try_map(&join(prefix, "fc2"), f)?,
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        if let Some(t) = self.rel_bias.as_ref() {
            f(&join(prefix, "rel_bias"), t);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        if let Some(t) = self.rel_bias.as_mut() {
            f(&join(prefix, "rel_bias"), t);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// 2x2 neighbourhood merge: norm over 4C then a bias-free reduction to 2C.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeW<P> {
    pub norm: NormW<P>,
    pub reduction: LinearW<P>,
}

impl<P> ParamTree<P> for MergeW<P> {
    type Mapped<Q> = MergeW<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<MergeW<Q>, E> {
        Ok(MergeW {
            norm: self.norm.try_map(&join(prefix, "norm"), f)?,
            reduction: self.reduction.try_map(&join(prefix, "reduction"), f)?,
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduction.visit(&join(prefix, "reduction"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduction.visit_mut(&join(prefix, "reduction"), f);
    }
}

/// Blocks of one stage, followed by the merge into the next stage (absent
/// on the last stage).
#[derive(Debug, Clone, PartialEq)]
pub struct StageW<P> {
    pub blocks: Vec<BlockW<P>>,
    pub merge: Option<MergeW<P>>,
}

impl<P> ParamTree<P> for StageW<P> {
    type Mapped<Q> = StageW<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<StageW<Q>, E> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push(b.try_map(&join(prefix, &format!("blocks.{i}")), f)?);
        }
        let merge = match &self.merge {
            Some(m) => Some(m.try_map(&join(prefix, "merge"), f)?),
            None => None,
        };
        Ok(StageW { blocks, merge })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(m) = self.merge.as_ref() {
            m.visit(&join(prefix, "merge"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(m) = self.merge.as_mut() {
            m.visit_mut(&join(prefix, "merge"), f);
        }
    }
}

/// Every learnable tensor of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinWeights<P> {
    pub patch: LinearW<P>,
    pub patch_norm: NormW<P>,
    pub stages: Vec<StageW<P>>,
    pub norm: NormW<P>,
    pub head: LinearW<P>,
}

/// Concrete parameter tensors.
pub type ModelParams<T> = SwinWeights<Tensor<T>>;

impl<P> ParamTree<P> for SwinWeights<P> {
    type Mapped<Q> = SwinWeights<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<SwinWeights<Q>, E> {
        let patch = self.patch.try_map(&join(prefix, "patch"), f)?;
        let patch_norm = self.patch_norm.try_map(&join(prefix, "patch_norm"), f)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            stages.push(s.try_map(&join(prefix, &format!("stages.{i}")), f)?);
        }
        Ok(SwinWeights {
            patch,
            patch_norm,
            stages,
            norm: self.norm.try_map(&join(prefix, "norm"), f)?,
            head: self.head.try_map(&join(prefix, "head"), f)?,
        })
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.patch.visit(&join(prefix, "patch"), f);
        self.patch_norm.visit(&join(prefix, "patch_norm"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.patch.visit_mut(&join(prefix, "patch"), f);
        self.patch_norm.visit_mut(&join(prefix, "patch_norm"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl<P> SwinWeights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> SwinWeights<Q> {
        self.try_map::<Q, std::convert::Infallible>("", &mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Leaves in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p)));
        out
    }
}

impl<T: Float> ModelParams<T> {
    /// Truncated-normal (sigma 0.02, cut at 2 sigma) projections, zero biases
    /// and relative-bias tables, unit norm gains.
    pub fn init(config: &SwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut trunc = |shape: [usize; 2]| {
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 0.04 {
                    break T::of(v);
                }
            })
        };
        let mut linear = |i: usize, o: usize, bias: bool| LinearW {
            weight: trunc([i, o]),
            bias: bias.then(|| Tensor::zeros([o])),
        };
        let norm = |d: usize| NormW { gain: Tensor::ones([d]), bias: Tensor::zeros([d]) };

        let p = config.patch_size;
        let patch = linear(config.in_channels * p * p, config.embed_dim, true);
        let patch_norm = norm(config.embed_dim);
        let mut stages = Vec::with_capacity(config.num_stages());
        for s in 0..config.num_stages() {
            let c = config.stage_dim(s);
            let m = config.stage_window(s);
            let hidden = c * config.mlp_ratio;
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for _ in 0..config.depths[s] {
                blocks.push(BlockW {
                    norm1: norm(c),
                    qkv: linear(c, 3 * c, true),
                    rel_bias: config
                        .rel_pos_bias
                        .then(|| Tensor::zeros([(2 * m - 1) * (2 * m - 1), config.heads[s]])),
                    proj: linear(c, c, true),
                    norm2: norm(c),
                    fc1: linear(c, hidden, true),
                    fc2: linear(hidden, c, true),
                });
            }
            let merge = (s + 1 < config.num_stages())
                .then(|| MergeW { norm: norm(4 * c), reduction: linear(4 * c, 2 * c, false) });
            stages.push(StageW { blocks, merge });
        }
        let final_dim = config.final_dim();
        Ok(SwinWeights {
            patch,
            patch_norm,
            stages,
            norm: norm(final_dim),
            head: linear(final_dim, config.num_classes, true),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}
