//! A small CPU neural-network engine: image classifiers whose parameters
//! live in one flat `f32` vector, with hand-written backward passes.
//!
//! Keeping parameters flat makes per-parameter operations (importance
//! estimation, dampening, content hashing, optimizer updates) plain slice
//! arithmetic.

mod layers;
pub mod loss;
pub mod optim;

pub use layers::Mode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use layers::{Cache, Layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchFamily {
    /// Two hidden ReLU layers of `width` units.
    #[serde(rename = "mlp")]
    Mlp,
    /// conv(width) → pool → conv(2·width) → pool → fc(64) → fc(C).
    #[serde(rename = "small-cnn")]
    SmallCnn,
    /// CIFAR-style ResNet-18: 4 stages × 2 basic blocks, widths width·{1,2,4,8}.
    #[serde(rename = "resnet18-class")]
    Resnet18,
}

impl ArchFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchFamily::Mlp => "mlp",
            ArchFamily::SmallCnn => "small-cnn",
            ArchFamily::Resnet18 => "resnet18-class",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            ArchFamily::Mlp => 128,
            ArchFamily::SmallCnn => 32,
            ArchFamily::Resnet18 => 64,
        }
    }
}

impl std::str::FromStr for ArchFamily {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchFamily::Mlp),
            "small-cnn" => Ok(ArchFamily::SmallCnn),
            "resnet18-class" | "resnet18" => Ok(ArchFamily::Resnet18),
            other => Err(BenchError::Config(format!("unknown architecture family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: ArchFamily,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub width: usize,
}

impl ArchitectureSpec {
    pub fn new(family: ArchFamily, input_shape: [usize; 3], classes: usize) -> Self {
        ArchitectureSpec {
            family,
            input_shape,
            classes,
            width: family.default_width(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Canonical tag such as `small-cnn/w32/3x32x32/c10`.
    pub fn tag(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!(
            "{}/w{}/{}x{}x{}/c{}",
            self.family.as_str(),
            self.width,
            c,
            h,
            w,
            self.classes
        )
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        let bad = || BenchError::Config(format!("malformed architecture tag {tag:?}"));
        let parts: Vec<&str> = tag.split('/').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let family: ArchFamily = parts[0].parse()?;
        let width = parts[1].strip_prefix('w').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let dims: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let classes = parts[3].strip_prefix('c').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if dims.len() != 3 {
            return Err(bad());
        }
        let spec = ArchitectureSpec {
            family,
            input_shape: [dims[0], dims[1], dims[2]],
            classes,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(BenchError::Config("class count must be at least 2".into()));
        }
        if self.width == 0 || self.input_shape.iter().any(|&d| d == 0) {
            return Err(BenchError::Config("architecture dimensions must be positive".into()));
        }
        let [_, h, w] = self.input_shape;
        match self.family {
            ArchFamily::SmallCnn if h % 4 != 0 || w % 4 != 0 => Err(BenchError::Config(
                "small-cnn needs input height and width divisible by 4".into(),
            )),
            ArchFamily::Resnet18 if h % 8 != 0 || w % 8 != 0 => Err(BenchError::Config(
                "resnet18-class needs input height and width divisible by 8".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    params: usize,
    buffers: usize,
    inits: Vec<(usize, usize, Init)>,
    buffer_inits: Vec<(usize, usize, Init)>,
}

impl Builder {
    fn param(&mut self, len: usize, init: Init) -> usize {
        let off = self.params;
        self.params += len;
        self.inits.push((off, len, init));
        off
    }

    fn buffer(&mut self, len: usize, init: Init) -> usize {
        let off = self.buffers;
        self.buffers += len;
        self.buffer_inits.push((off, len, init));
        off
    }

    fn linear(&mut self, inp: usize, out: usize) -> Layer {
        let w = self.param(inp * out, Init::He { fan_in: inp });
        let b = self.param(out, Init::Zeros);
        Layer::Linear { inp, out, w, b }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        bias: bool,
    ) -> Layer {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let wt = self.param(cout * cin * k * k, Init::He { fan_in: cin * k * k });
        let b = bias.then(|| self.param(cout, Init::Zeros));
        Layer::Conv {
            cin,
            cout,
            k,
            stride,
            pad,
            h,
            w,
            oh,
            ow,
            wt,
            b,
        }
    }

    fn batch_norm(&mut self, c: usize, spatial: usize) -> Layer {
        Layer::BatchNorm {
            c,
            spatial,
            gamma: self.param(c, Init::Ones),
            beta: self.param(c, Init::Zeros),
            mean: self.buffer(c, Init::Zeros),
            var: self.buffer(c, Init::Ones),
        }
    }

    fn basic_block(&mut self, cin: usize, cout: usize, stride: usize, h: usize, w: usize) -> Layer {
        let (oh, ow) = (h / stride, w / stride);
        let body = vec![
            self.conv(cin, cout, 3, stride, 1, h, w, false),
            self.batch_norm(cout, oh * ow),
            Layer::Relu,
            self.conv(cout, cout, 3, 1, 1, oh, ow, false),
            self.batch_norm(cout, oh * ow),
        ];
        let shortcut = if stride != 1 || cin != cout {
            vec![
                self.conv(cin, cout, 1, stride, 0, h, w, false),
                self.batch_norm(cout, oh * ow),
            ]
        } else {
            Vec::new()
        };
        Layer::Residual { body, shortcut }
    }
}

/// A classifier: layer graph plus flat parameters and non-trainable buffers.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchitectureSpec,
    layers: Vec<Layer>,
    pub params: Vec<f32>,
    /// Batch-norm running statistics.
    pub buffers: Vec<f32>,
}

/// Intermediate activations recorded by a forward pass, consumed by backward.
pub struct Tape {
    caches: Vec<Cache>,
    n: usize,
}

impl Network {
    /// Builds the architecture and draws an initialization from `seed`.
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let (layers, builder) = Self::build(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; builder.params];
        fill(&mut params, &builder.inits, &mut rng);
        let mut buffers = vec![0.0f32; builder.buffers];
        fill(&mut buffers, &builder.buffer_inits, &mut rng);
        Ok(Network {
            arch: arch.clone(),
            layers,
            params,
            buffers,
        })
    }

    /// Rebuilds a network around stored parameters.
    pub fn from_parts(arch: &ArchitectureSpec, params: Vec<f32>, buffers: Vec<f32>) -> Result<Self> {
        let (layers, builder) = Self::build(arch)?;
        if params.len() != builder.params || buffers.len() != builder.buffers {
            return Err(BenchError::ShapeMismatch(format!(
                "{} expects {} params / {} buffers, got {} / {}",
                arch.tag(),
                builder.params,
                builder.buffers,
                params.len(),
                buffers.len()
            )));
        }
        Ok(Network {
            arch: arch.clone(),
            layers,
            params,
            buffers,
        })
    }

    fn build(arch: &ArchitectureSpec) -> Result<(Vec<Layer>, Builder)> {
        arch.validate()?;
        let mut b = Builder::default();
        let [c, h, w] = arch.input_shape;
        let width = arch.width;
        let layers = match arch.family {
            ArchFamily::Mlp => vec![
                b.linear(c * h * w, width),
                Layer::Relu,
                b.linear(width, width),
                Layer::Relu,
                b.linear(width, arch.classes),
            ],
            ArchFamily::SmallCnn => vec![
                b.conv(c, width, 3, 1, 1, h, w, true),
                Layer::Relu,
                Layer::MaxPool2 { c: width, h, w },
                b.conv(width, 2 * width, 3, 1, 1, h / 2, w / 2, true),
                Layer::Relu,
                Layer::MaxPool2 {
                    c: 2 * width,
                    h: h / 2,
                    w: w / 2,
                },
                b.linear(2 * width * (h / 4) * (w / 4), 64),
                Layer::Relu,
                b.linear(64, arch.classes),
            ],
            ArchFamily::Resnet18 => {
                let mut layers = vec![
                    b.conv(c, width, 3, 1, 1, h, w, false),
                    b.batch_norm(width, h * w),
                    Layer::Relu,
                ];
                let (mut ch, mut hh, mut ww) = (width, h, w);
                for stage in 0..4 {
                    let out = width << stage;
                    let stride = if stage == 0 { 1 } else { 2 };
                    layers.push(b.basic_block(ch, out, stride, hh, ww));
                    layers.push(Layer::Relu);
                    hh /= stride;
                    ww /= stride;
                    ch = out;
                    layers.push(b.basic_block(ch, out, 1, hh, ww));
                    layers.push(Layer::Relu);
                }
                layers.push(Layer::GlobalAvgPool {
                    c: ch,
                    spatial: hh * ww,
                });
                layers.push(b.linear(ch, arch.classes));
                layers
            }
        };
        Ok((layers, b))
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Forward pass over `n` stacked inputs, recording a tape for backward.
    /// Train mode normalizes with batch statistics and updates running stats.
    pub fn forward(&mut self, x: &[f32], n: usize, mode: Mode) -> (Vec<f32>, Tape) {
        debug_assert_eq!(x.len(), n * self.arch.input_len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&self.params, &mut self.buffers, &h, n, mode, Some(&mut caches));
        }
        (h, Tape { caches, n })
    }

    /// Eval-mode logits without recording anything.
    pub fn predict(&self, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.arch.input_len());
        // eval mode never writes buffers; the copy keeps `&self`
        let mut buffers = self.buffers.clone();
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&self.params, &mut buffers, &h, n, Mode::Eval, None);
        }
        h
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
    pub fn backward(&self, tape: Tape, dlogits: &[f32], grads: &mut [f32]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let n = tape.n;
        let mut d = dlogits.to_vec();
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            d = layer.backward(&self.params, cache, &d, n, grads);
        }
    }

    /// Serialized weights: magic `FBW1`, u32 param count, u32 buffer count,
    /// then little-endian f32 params followed by buffers.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * (self.params.len() + self.buffers.len()));
        out.extend_from_slice(b"FBW1");
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for v in self.params.iter().chain(&self.buffers) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(arch: &ArchitectureSpec, blob: &[u8]) -> Result<Self> {
        let bad = |reason: &str| BenchError::ShapeMismatch(format!("weight blob: {reason}"));
        if blob.len() < 12 || &blob[..4] != b"FBW1" {
            return Err(bad("missing header"));
        }
        let np = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
        let nb = u32::from_le_bytes(blob[8..12].try_into().unwrap()) as usize;
        if blob.len() != 12 + 4 * (np + nb) {
            return Err(bad("length does not match header"));
        }
        let mut floats = blob[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let params = floats.by_ref().take(np).collect();
        let buffers = floats.collect();
        Network::from_parts(arch, params, buffers)
    }
}

fn fill(values: &mut [f32], inits: &[(usize, usize, Init)], rng: &mut ChaCha8Rng) {
    for &(off, len, init) in inits {
        let slot = &mut values[off..off + len];
        match init {
            Init::Zeros => slot.fill(0.0),
            Init::Ones => slot.fill(1.0),
            Init::He { fan_in } => {
                let bound = (6.0 / fan_in as f32).sqrt();
                for v in slot {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference_check(arch: ArchitectureSpec, n: usize, mode: Mode) {
        let mut net = Network::new(&arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // move BN running stats away from the init so eval mode is non-trivial
        for v in net.buffers.iter_mut() {
            *v += rng.random_range(0.1..0.5);
        }
        let x: Vec<f32> = (0..n * arch.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % arch.classes).collect();
        let loss_at = |net: &Network| -> f64 {
            let mut copy = net.clone();
            let (logits, _) = copy.forward(&x, n, mode);
            loss::cross_entropy(&logits, &labels, arch.classes).0
        };
        let mut work = net.clone();
        let (logits, tape) = work.forward(&x, n, mode);
        let (_, dlogits) = loss::cross_entropy(&logits, &labels, arch.classes);
        let mut grads = vec![0.0f32; net.param_count()];
        net.backward(tape, &dlogits, &mut grads);

        let step = 1e-3f32;
        let picks: Vec<usize> = (0..24).map(|_| rng.random_range(0..net.param_count())).collect();
        for j in picks {
            let orig = net.params[j];
            net.params[j] = orig + step;
            let up = loss_at(&net);
            net.params[j] = orig - step;
            let down = loss_at(&net);
            net.params[j] = orig;
            let numeric = (up - down) / (2.0 * step as f64);
            let analytic = grads[j] as f64;
            let tol = 2e-3 + 5e-2 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() <= tol,
                "{} param {j}: numeric {numeric} analytic {analytic}",
                arch.tag()
            );
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        finite_difference_check(ArchitectureSpec::new(ArchFamily::Mlp, [1, 4, 4], 3).with_width(8), 5, Mode::Train);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        finite_difference_check(
            ArchitectureSpec::new(ArchFamily::SmallCnn, [2, 8, 8], 4).with_width(3),
            3,
            Mode::Train,
        );
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        let arch = ArchitectureSpec::new(ArchFamily::Resnet18, [3, 8, 8], 3).with_width(2);
        finite_difference_check(arch.clone(), 4, Mode::Train);
        finite_difference_check(arch, 2, Mode::Eval);
    }

    #[test]
    fn small_cnn_on_cifar_shape_is_about_300k_params() {
        let net = Network::new(&ArchitectureSpec::new(ArchFamily::SmallCnn, [3, 32, 32], 10), 0).unwrap();
        assert!((250_000..350_000).contains(&net.param_count()), "{}", net.param_count());
    }

    #[test]
    fn resnet18_full_width_has_eleven_million_params() {
        let net = Network::new(&ArchitectureSpec::new(ArchFamily::Resnet18, [3, 32, 32], 10), 0).unwrap();
        assert!((11_000_000..11_300_000).contains(&net.param_count()), "{}", net.param_count());
    }

    #[test]
    fn blob_round_trip_and_tag_parse() {
        let arch = ArchitectureSpec::new(ArchFamily::Resnet18, [3, 8, 8], 5).with_width(2);
        let net = Network::new(&arch, 9).unwrap();
        let back = Network::from_blob(&arch, &net.to_blob()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.buffers, net.buffers);
        assert_eq!(ArchitectureSpec::from_tag(&arch.tag()).unwrap(), arch);
        assert!(ArchitectureSpec::from_tag("mlp/w8/1x4x4/c1").is_err());
        let other = ArchitectureSpec::new(ArchFamily::Mlp, [3, 8, 8], 5);
        assert_eq!(Network::from_blob(&other, &net.to_blob()).unwrap_err().code(), "SHAPE_MISMATCH");
    }
}
