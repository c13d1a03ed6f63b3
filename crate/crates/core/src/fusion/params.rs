use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokens::{POSITION_DIM, VOCAB_SIZE};
use super::FusionError;

pub const IMAGE_CHANNELS: usize = 3;
pub const KERNEL: usize = 3;

/// Layer sizes. Everything else about the topology is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionDims {
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub position_hidden: usize,
    pub conv_channels: [usize; 3],
    pub image_feature: usize,
    /// Input rasters are resampled to `image_side` x `image_side`.
    pub image_side: usize,
    pub max_tokens: usize,
    pub max_text_chars: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        FusionDims {
            embed_dim: 16,
            text_hidden: 32,
            position_hidden: 16,
            conv_channels: [8, 16, 16],
            image_feature: 32,
            image_side: 32,
            max_tokens: 32,
            max_text_chars: 64,
        }
    }
}

impl FusionDims {
    pub fn head_input(&self) -> usize {
        self.text_hidden + self.position_hidden + self.image_feature
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let sizes = [
            self.embed_dim,
            self.text_hidden,
            self.position_hidden,
            self.conv_channels[0],
            self.conv_channels[1],
            self.conv_channels[2],
            self.image_feature,
            self.image_side,
            self.max_tokens,
            self.max_text_chars,
        ];
        if sizes.contains(&0) {
            return Err(FusionError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A named dense array in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gate order is update (z), reset (r), candidate (n).
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w: [Tensor; 3],
    pub u: [Tensor; 3],
    pub b: [Tensor; 3],
}

impl GruParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w: std::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            u: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruParams {
            w: std::array::from_fn(|_| Tensor::uniform(&[hidden, input], bound, rng)),
            u: std::array::from_fn(|_| Tensor::uniform(&[hidden, hidden], bound, rng)),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[out, in, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dims: FusionDims,
    /// `[VOCAB_SIZE, embed_dim]`
    pub embedding: Tensor,
    pub text_gru: GruParams,
    pub position_gru: GruParams,
    pub conv: [ConvParams; 3],
    /// `[image_feature, conv_channels[2]]`
    pub projection: Tensor,
    pub projection_bias: Tensor,
    /// `[head_input]`
    pub head: Tensor,
    pub head_bias: Tensor,
}

fn gru_names(prefix: &str) -> impl Iterator<Item = String> + '_ {
    ["w", "u", "b"].into_iter().flat_map(move |kind| {
        ["z", "r", "n"]
            .into_iter()
            .map(move |gate| format!("{prefix}.{kind}_{gate}"))
    })
}

impl FusionParams {
    pub fn zeros(dims: &FusionDims) -> Self {
        let c = dims.conv_channels;
        let ins = [IMAGE_CHANNELS, c[0], c[1]];
        FusionParams {
            dims: dims.clone(),
            embedding: Tensor::zeros(&[VOCAB_SIZE, dims.embed_dim]),
            text_gru: GruParams::zeros(dims.embed_dim, dims.text_hidden),
            position_gru: GruParams::zeros(POSITION_DIM, dims.position_hidden),
            conv: std::array::from_fn(|i| ConvParams {
                weight: Tensor::zeros(&[c[i], ins[i], KERNEL, KERNEL]),
                bias: Tensor::zeros(&[c[i]]),
            }),
            projection: Tensor::zeros(&[dims.image_feature, c[2]]),
            projection_bias: Tensor::zeros(&[dims.image_feature]),
            head: Tensor::zeros(&[dims.head_input()]),
            head_bias: Tensor::zeros(&[1]),
        }
    }

    /// Uniform fan-in initialization; biases start at zero.
    pub fn init(dims: &FusionDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = dims.conv_channels;
        let ins = [IMAGE_CHANNELS, c[0], c[1]];
        let embedding = Tensor::uniform(&[VOCAB_SIZE, dims.embed_dim], 1.0, &mut rng);
        let text_gru = GruParams::init(dims.embed_dim, dims.text_hidden, &mut rng);
        let position_gru = GruParams::init(POSITION_DIM, dims.position_hidden, &mut rng);
        let conv = std::array::from_fn(|i| {
            let fan_in = (ins[i] * KERNEL * KERNEL) as f64;
            ConvParams {
                weight: Tensor::uniform(&[c[i], ins[i], KERNEL, KERNEL], (3.0 / fan_in).sqrt(), &mut rng),
                bias: Tensor::zeros(&[c[i]]),
            }
        });
        let projection = Tensor::uniform(&[dims.image_feature, c[2]], (3.0 / c[2] as f64).sqrt(), &mut rng);
        let head = Tensor::uniform(&[dims.head_input()], 1.0 / (dims.head_input() as f64).sqrt(), &mut rng);
        FusionParams {
            dims: dims.clone(),
            embedding,
            text_gru,
            position_gru,
            conv,
            projection,
            projection_bias: Tensor::zeros(&[dims.image_feature]),
            head,
            head_bias: Tensor::zeros(&[1]),
        }
    }

    /// Stable tensor names, in [`FusionParams::tensors`] order.
    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        names.extend(gru_names("text_gru"));
        names.extend(gru_names("position_gru"));
        for i in 1..=3 {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        names.extend(
            ["projection.weight", "projection.bias", "head.weight", "head.bias"]
                .map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for g in [&self.text_gru, &self.position_gru] {
            out.extend(g.w.iter().chain(&g.u).chain(&g.b));
        }
        for c in &self.conv {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.extend([&self.projection, &self.projection_bias, &self.head, &self.head_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for g in [&mut self.text_gru, &mut self.position_gru] {
            out.extend(g.w.iter_mut().chain(g.u.iter_mut()).chain(g.b.iter_mut()));
        }
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.projection,
            &mut self.projection_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every tensor has the shape implied by `dims`.
    pub fn check_shapes(&self) -> Result<(), FusionError> {
        self.dims.validate()?;
        let expected = FusionParams::zeros(&self.dims);
        for ((name, have), want) in Self::tensor_names()
            .into_iter()
            .zip(self.tensors())
            .zip(expected.tensors())
        {
            if have.shape != want.shape || have.data.len() != want.data.len() {
                return Err(FusionError::Shape {
                    tensor: name,
                    expected: want.shape.clone(),
                    found: have.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &FusionParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_tensor_count() {
        let p = FusionParams::zeros(&FusionDims::default());
        assert_eq!(FusionParams::tensor_names().len(), p.tensors().len());
        assert!(p.check_shapes().is_ok());
    }

    #[test]
    fn head_matches_concatenated_features() {
        let dims = FusionDims::default();
        let p = FusionParams::init(&dims, 3);
        assert_eq!(p.head.len(), 32 + 16 + 32);
        assert_eq!(p.head.len(), dims.head_input());
    }

    #[test]
    fn init_is_seeded() {
        let dims = FusionDims::default();
        assert_eq!(FusionParams::init(&dims, 5), FusionParams::init(&dims, 5));
        assert_ne!(FusionParams::init(&dims, 5), FusionParams::init(&dims, 6));
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut p = FusionParams::zeros(&FusionDims::default());
        p.head = Tensor::zeros(&[7]);
        match p.check_shapes() {
            Err(FusionError::Shape { tensor, .. }) => assert_eq!(tensor, "head.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
