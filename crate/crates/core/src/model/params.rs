use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imagedata::Rng;

/// Encoder and head sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Projection head output size `K`.
    pub out_dim: usize,
    pub patch: usize,
    /// Side of the largest view; the positional table is sized for its grid.
    pub global_size: usize,
    /// Disabling positions makes the encoder permutation-equivariant over patches.
    pub use_pos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 96,
            heads: 4,
            out_dim: 1024,
            patch: 4,
            global_size: 32,
            use_pos: true,
        }
    }
}

/// Name, shape and weight-decay eligibility of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

const BLOCK_PARAMS: usize = 12;
const STEM_PARAMS: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("degenerate model {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || !self.global_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} does not divide global size {}",
                self.patch, self.global_size
            )));
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        4 * self.dim
    }

    pub fn global_grid(&self) -> usize {
        self.global_size / self.patch
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub(crate) fn block_base(&self, b: usize) -> usize {
        STEM_PARAMS + BLOCK_PARAMS * b
    }

    pub(crate) fn final_norm(&self) -> usize {
        self.block_base(self.depth)
    }

    pub(crate) fn head_base(&self) -> usize {
        self.final_norm() + 2
    }

    /// Parameter arrays in storage order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let hid = self.head_hidden();
        let spec = |name: String, shape: Vec<usize>, decay| ParamSpec { name, shape, decay };
        let mut out = vec![
            spec("patch_embed.weight".into(), vec![self.patch_features(), d], true),
            spec("patch_embed.bias".into(), vec![d], false),
            spec("cls".into(), vec![1, d], false),
            spec("pos".into(), vec![self.global_grid().pow(2), d], false),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                spec(p("norm1.gamma"), vec![d], false),
                spec(p("norm1.beta"), vec![d], false),
                spec(p("attn.qkv.weight"), vec![d, 3 * d], true),
                spec(p("attn.qkv.bias"), vec![3 * d], false),
                spec(p("attn.proj.weight"), vec![d, d], true),
                spec(p("attn.proj.bias"), vec![d], false),
                spec(p("norm2.gamma"), vec![d], false),
                spec(p("norm2.beta"), vec![d], false),
                spec(p("mlp.fc1.weight"), vec![d, 4 * d], true),
                spec(p("mlp.fc1.bias"), vec![4 * d], false),
                spec(p("mlp.fc2.weight"), vec![4 * d, d], true),
                spec(p("mlp.fc2.bias"), vec![d], false),
            ]);
        }
        out.extend([
            spec("norm.gamma".into(), vec![d], false),
            spec("norm.beta".into(), vec![d], false),
            spec("head.fc1.weight".into(), vec![d, hid], true),
            spec("head.fc1.bias".into(), vec![hid], false),
            spec("head.fc2.weight".into(), vec![hid, hid], true),
            spec("head.fc2.bias".into(), vec![hid], false),
            spec("head.fc3.weight".into(), vec![hid, self.out_dim], true),
            spec("head.fc3.bias".into(), vec![self.out_dim], false),
        ]);
        out
    }
}

/// All learnable arrays of one encoder plus head, in [`ModelConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Encoder weights ~ N(0, 0.02), head weights ~ N(0, 1 / fan_in), biases zero,
    /// norm gains one. The head has no normalized bottleneck, so the small
    /// encoder scale would leave its logits near zero and the teacher uniform.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|spec| {
                if spec.name.ends_with(".gamma") {
                    Tensor::ones(&spec.shape)
                } else if spec.name.ends_with(".bias") || spec.name.ends_with(".beta") {
                    Tensor::zeros(&spec.shape)
                } else if spec.name.starts_with("head.") {
                    Tensor::randn(&spec.shape, 1.0 / (spec.shape[0] as f64).sqrt(), rng)
                } else {
                    Tensor::randn(&spec.shape, 0.02, rng)
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Wraps existing arrays after checking them against the layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::shape(
                "ModelParams::from_tensors",
                format!("{} arrays for a layout of {}", tensors.len(), layout.len()),
            ));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::shape(
                    "ModelParams::from_tensors",
                    format!("{}: {:?} vs {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.config.layout().iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
