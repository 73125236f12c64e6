//! Teacher and student segmentation networks.
//!
//! Both roles share one tiny encoder-decoder family: `depth` encoder blocks
//! (3x3 conv + relu + 2x subsample), one 3x3 context block, `depth` decoder
//! blocks (2x nearest upsample + 3x3 conv + relu) and a final 1x1 conv to
//! class logits. Capacity is set through `depth`, `base_channels` and a
//! width multiplier; every block uses `max(1, round(base * width))` channels.
//! Each downsampling step is a stride-1 convolution followed by a top-left
//! 2x subsample, which computes exactly the floor-semantics stride-2
//! convolution while keeping every recorded conv's output size integral.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::LogitsMap;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError};

const CHECKPOINT_MAGIC: &[u8; 5] = b"KDSEG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor set mismatch: {0}")]
    TensorSet(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub width_multiplier: f64,
    pub input_channels: usize,
}

impl NetworkConfig {
    /// Default teacher capacity: same pyramid as the students but much
    /// wider. Going deeper instead costs more than it buys at toy
    /// resolutions: each extra halving leaves the smallest shapes sub-pixel
    /// at the bottleneck (there are no skip connections to recover them)
    /// and the teacher stops outperforming the student.
    pub fn teacher_preset(num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            depth: 2,
            base_channels: 36,
            width_multiplier: 1.0,
            input_channels: 3,
        }
    }

    /// Student presets, shrunk by a width multiplier in (0, 2].
    pub fn student_preset(num_classes: usize, width_multiplier: f64) -> Self {
        NetworkConfig {
            num_classes,
            depth: 2,
            base_channels: 16,
            width_multiplier,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(ModelError::Config(format!(
                "num_classes must be in [2, 254], got {}",
                self.num_classes
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(ModelError::Config("base_channels must be at least 1".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 2.0) {
            return Err(ModelError::Config(format!(
                "width_multiplier must lie in (0, 2], got {}",
                self.width_multiplier
            )));
        }
        if self.input_channels == 0 {
            return Err(ModelError::Config("input_channels must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel count every block uses.
    pub fn effective_channels(&self) -> usize {
        ((self.base_channels as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<S = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// A segmentation network: a config plus its named, ordered parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNetwork<S = f32> {
    config: NetworkConfig,
    params: Vec<NamedParam<S>>,
    role: Role,
}

/// Shape plan of every parameter tensor, in declaration order.
fn parameter_plan(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.effective_channels();
    let mut plan = Vec::new();
    let mut in_ch = config.input_channels;
    for i in 0..config.depth {
        plan.push((format!("enc{}.weight", i), vec![c, in_ch, 3, 3]));
        plan.push((format!("enc{}.bias", i), vec![c]));
        in_ch = c;
    }
    plan.push(("ctx.weight".into(), vec![c, c, 3, 3]));
    plan.push(("ctx.bias".into(), vec![c]));
    for i in 0..config.depth {
        plan.push((format!("dec{}.weight", i), vec![c, c, 3, 3]));
        plan.push((format!("dec{}.bias", i), vec![c]));
    }
    plan.push(("head.weight".into(), vec![config.num_classes, c, 1, 1]));
    plan.push(("head.bias".into(), vec![config.num_classes]));
    plan
}

/// Build a network with seeded He-style uniform fan-in initialization.
/// Biases and the final classifier start at zero, so a fresh net emits
/// all-zero logits (uniform class probabilities); at lr 0.1 with momentum a
/// randomly initialized head otherwise kicks the first steps hard enough to
/// strand training in the constant-prediction basin. The same
/// `(config, seed)` pair always produces identical parameters.
pub fn build_network<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<SegNetwork<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = parameter_plan(config)
        .into_iter()
        .map(|(name, shape)| {
            let tensor = if name.ends_with(".bias") || name == "head.weight" {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::rand_uniform(&mut rng, &shape, -bound, bound)
            };
            NamedParam { name, tensor }
        })
        .collect();
    Ok(SegNetwork {
        config: config.clone(),
        params,
        role: Role::Student,
    })
}

impl<S: Scalar> SegNetwork<S> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn parameters(&self) -> &[NamedParam<S>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [NamedParam<S>] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, images: &Tensor<S>) -> Result<(usize, usize)> {
        let (_, cin, h, w) = images.dims4()?;
        if cin != self.config.input_channels {
            return Err(ModelError::Dimension(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels, cin
            )));
        }
        let factor = 1usize << self.config.depth;
        if h % factor != 0 || w % factor != 0 || h / factor == 0 || w / factor == 0 {
            return Err(ModelError::Dimension(format!(
                "spatial size {}x{} is not divisible by 2^depth = {}",
                h, w, factor
            )));
        }
        Ok((h, w))
    }

    /// Inference forward pass; no gradients are recorded.
    pub fn forward(&self, images: &Tensor<S>) -> Result<LogitsMap<S>> {
        let mut tape = Tape::new();
        let input = tape.constant(images.clone());
        let (logits, _) = self.forward_inner(&mut tape, input, images, false)?;
        let values = tape.value(logits).clone();
        Ok(LogitsMap::new(values).map_err(|_| {
            ModelError::Tensor(TensorError::NonFinite("network logits".into()))
        })?)
    }

    /// Training forward pass: parameters become `requires_grad` leaves on
    /// `tape`, returned in declaration order next to the logits node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let input = tape.constant(images.clone());
        self.forward_inner(tape, input, images, true)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<S>,
        input: TensorId,
        images: &Tensor<S>,
        train: bool,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        self.check_input(images)?;
        let mut param_ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let id = if train {
                tape.param(p.tensor.clone())
            } else {
                tape.constant(p.tensor.clone())
            };
            param_ids.push(id);
        }

        let mut pairs = param_ids.chunks_exact(2).map(|p| (p[0], p[1]));
        let mut x = input;
        for _ in 0..self.config.depth {
            let (w, b) = pairs.next().expect("parameter plan");
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x)?;
            x = tape.subsample2x(x)?;
        }
        let (w, b) = pairs.next().expect("parameter plan");
        x = tape.conv2d(x, w, b, 1, 1)?;
        x = tape.relu(x)?;
        for _ in 0..self.config.depth {
            let (w, b) = pairs.next().expect("parameter plan");
            x = tape.upsample_nearest2x(x)?;
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x)?;
        }
        let (w, b) = pairs.next().expect("parameter plan");
        x = tape.conv2d(x, w, b, 1, 0)?;
        Ok((x, param_ids))
    }
}

impl SegNetwork<f32> {
    /// Write the network to the little-endian `KDSEG` checkpoint format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.config.depth as u32).to_le_bytes())?;
        w.write_all(&((self.config.base_channels * 1000) as u32).to_le_bytes())?;
        w.write_all(&((self.config.width_multiplier * 1000.0).round() as u32).to_le_bytes())?;
        w.write_all(&(self.config.input_channels as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
            for d in p.tensor.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Cursor {
    bytes: Vec<u8>,
    at: usize,
}

impl Cursor {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(ModelError::Truncated);
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Load a `KDSEG` checkpoint. The parameter set must match the embedded
/// config's architecture exactly; the role tag defaults to `Student`.
pub fn load_checkpoint(path: &Path) -> Result<SegNetwork<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes, at: 0 };

    if cur.take(5).map_err(|_| ModelError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let num_classes = cur.u32()? as usize;
    let depth = cur.u32()? as usize;
    let base_channels = cur.u32()? as usize / 1000;
    let width_multiplier = cur.u32()? as f64 / 1000.0;
    let input_channels = cur.u32()? as usize;
    let config = NetworkConfig {
        num_classes,
        depth,
        base_channels,
        width_multiplier,
        input_channels,
    };
    config.validate()?;

    let mut params = Vec::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ModelError::TensorSet("non-utf8 tensor name".into()))?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(NamedParam {
            name,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }

    let plan = parameter_plan(&config);
    if plan.len() != params.len() {
        return Err(ModelError::TensorSet(format!(
            "expected {} tensors, found {}",
            plan.len(),
            params.len()
        )));
    }
    for ((name, shape), param) in plan.iter().zip(&params) {
        if *name != param.name {
            return Err(ModelError::TensorSet(format!(
                "expected tensor {}, found {}",
                name, param.name
            )));
        }
        if shape != param.tensor.shape() {
            return Err(ModelError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                found: param.tensor.shape().to_vec(),
            });
        }
    }

    Ok(SegNetwork {
        config,
        params,
        role: Role::Student,
    })
}
