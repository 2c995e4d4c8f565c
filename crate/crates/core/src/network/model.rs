use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cam::ClassActivationMap;
use crate::error::{Error, Result};
use crate::numerics::{maxpool2x2_backward, maxpool2x2_forward, ConvGeometry, ConvParams, MaxPoolIndices, Tensor};
use crate::rng;

const CHECKPOINT_MAGIC: &[u8; 8] = b"WSODCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const INIT_STREAM: u64 = 0x1417;

/// Architecture of the fully convolutional class-activation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub class_count: usize,
    /// Width of each block of two 3×3 convolutions followed by 2×2 pooling.
    pub block_widths: Vec<usize>,
    pub head_width: usize,
    /// Subtracted from every input value, so a mid-grey background matches
    /// the zero padding of the convolutions.
    #[serde(default = "default_input_offset")]
    pub input_offset: f64,
}

fn default_input_offset() -> f64 {
    0.5
}

impl NetworkConfig {
    pub fn new(class_count: usize) -> Self {
        NetworkConfig {
            input_width: 64,
            input_height: 64,
            input_channels: 3,
            class_count,
            block_widths: vec![16, 32, 64],
            head_width: 64,
            input_offset: default_input_offset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.input_channels == 0 || self.head_width == 0 {
            return Err(Error::Config("class count, input channels and head width must be positive".into()));
        }
        if !self.input_offset.is_finite() {
            return Err(Error::Config("input offset must be finite".into()));
        }
        if self.block_widths.contains(&0) {
            return Err(Error::Config("block widths must be positive".into()));
        }
        let factor = 1usize << self.block_widths.len();
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % factor != 0
            || self.input_height % factor != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by {factor} ({} pooling blocks)",
                self.input_width,
                self.input_height,
                self.block_widths.len()
            )));
        }
        Ok(())
    }

    /// `(height, width)` of the class activation map.
    pub fn output_dims(&self) -> (usize, usize) {
        let factor = 1usize << self.block_widths.len();
        (self.input_height / factor, self.input_width / factor)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Relu,
    Pool,
}

/// Per-sample intermediate state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    cam: ClassActivationMap,
    cols: Vec<Vec<f64>>,
    relu_masks: Vec<Vec<bool>>,
    pools: Vec<MaxPoolIndices>,
}

impl ForwardPass {
    pub fn cam(&self) -> &ClassActivationMap {
        &self.cam
    }

    pub fn into_cam(self) -> ClassActivationMap {
        self.cam
    }
}

/// Parameter gradients, one kernel and one bias group per convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            groups: net
                .convs
                .iter()
                .flat_map(|p| [vec![0.0; p.kernel.len()], vec![0.0; p.bias.len()]])
                .collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn fill_zero(&mut self) {
        self.groups.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.groups.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups.concat()
    }
}

/// Convolution blocks, a 3×3 head and a 1×1 layer with one filter per class.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    convs: Vec<ConvParams>,
    geometry: Vec<ConvGeometry>,
    ops: Vec<Op>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.convs == other.convs
    }
}

impl Network {
    /// He-uniform kernels, zero biases, reproducible from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        for (i, params) in net.convs.iter_mut().enumerate() {
            let mut rng = rng::stream(seed, &[INIT_STREAM, i as u64]);
            let (kh, kw) = params.kernel_dims();
            let fan_in = (params.in_channels() * kh * kw) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in params.kernel.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// The architecture with every parameter zero.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut ops = Vec::new();
        let mut in_ch = config.input_channels;
        let mut push_conv = |out_ch: usize, k: usize, convs: &mut Vec<ConvParams>, ops: &mut Vec<Op>| {
            ops.push(Op::Conv(convs.len()));
            convs.push(ConvParams::zeros(out_ch, in_ch, k, k));
            in_ch = out_ch;
        };
        for &width in &config.block_widths {
            push_conv(width, 3, &mut convs, &mut ops);
            ops.push(Op::Relu);
            push_conv(width, 3, &mut convs, &mut ops);
            ops.push(Op::Relu);
            ops.push(Op::Pool);
        }
        push_conv(config.head_width, 3, &mut convs, &mut ops);
        ops.push(Op::Relu);
        push_conv(config.class_count, 1, &mut convs, &mut ops);

        let mut geometry = Vec::with_capacity(convs.len());
        let (mut h, mut w) = (config.input_height, config.input_width);
        let mut ch = config.input_channels;
        for op in &ops {
            match *op {
                Op::Conv(i) => {
                    let padding = convs[i].kernel_dims().0 / 2;
                    let g = ConvGeometry::new(&[1, ch, h, w], &convs[i], 1, padding)?;
                    (ch, h, w) = (g.out_ch, g.oh, g.ow);
                    geometry.push(g);
                }
                Op::Relu => {}
                Op::Pool => (h, w) = (h / 2, w / 2),
            }
        }
        Ok(Network {
            config,
            convs,
            geometry,
            ops,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.convs
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        &mut self.convs
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvParams::param_count).sum()
    }

    /// Parameter groups in checkpoint order: kernel then bias of each layer.
    pub fn param_groups_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.convs
            .iter_mut()
            .flat_map(|p| [p.kernel.data_mut(), p.bias.as_mut_slice()])
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.convs
            .iter()
            .flat_map(|p| p.kernel.data().iter().chain(&p.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: values.len(),
            });
        }
        let mut rest = values;
        for group in self.param_groups_mut() {
            let (head, tail) = rest.split_at(group.len());
            group.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let want = self.config.input_shape();
        let ok = image.shape() == want || image.shape() == [1, want[0], want[1], want[2]];
        if !ok {
            return Err(Error::Shape(format!(
                "network expects an image of shape {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid class activation map of one `[C, H, W]` image.
    pub fn forward_cam(&self, image: &Tensor) -> Result<ClassActivationMap> {
        Ok(self.forward(image)?.cam)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        self.check_input(image)?;
        let [mut ch, mut h, mut w] = self.config.input_shape();
        let offset = self.config.input_offset;
        let mut x: Vec<f64> = image.data().iter().map(|v| v - offset).collect();
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut relu_masks = Vec::new();
        let mut pools = Vec::new();
        for op in &self.ops {
            match *op {
                Op::Conv(i) => {
                    let g = &self.geometry[i];
                    let mut c = vec![0.0; g.patch_len() * g.out_pixels()];
                    g.im2col(&x, &mut c);
                    let mut out = vec![0.0; g.out_sample_len()];
                    g.forward_sample(&self.convs[i], &c, &mut out);
                    cols.push(c);
                    x = out;
                    ch = g.out_ch;
                }
                Op::Relu => {
                    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
                    for (v, &m) in x.iter_mut().zip(&mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    relu_masks.push(mask);
                }
                Op::Pool => {
                    let t = Tensor::from_parts(vec![1, ch, h, w], x)?;
                    let (out, idx) = maxpool2x2_forward(&t)?;
                    pools.push(idx);
                    (h, w) = (h / 2, w / 2);
                    x = out.into_data();
                }
            }
        }
        let cam = ClassActivationMap::new(Tensor::from_parts(vec![ch, h, w], x)?)?;
        Ok(ForwardPass {
            cam,
            cols,
            relu_masks,
            pools,
        })
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the map.
    pub fn backward(&self, pass: &ForwardPass, grad_cam: &[f64], grads: &mut Gradients) -> Result<()> {
        if grad_cam.len() != pass.cam.tensor().len() {
            return Err(Error::DimensionMismatch {
                expected: pass.cam.tensor().len(),
                actual: grad_cam.len(),
            });
        }
        let mut g = grad_cam.to_vec();
        let mut relu_i = pass.relu_masks.len();
        let mut pool_i = pass.pools.len();
        for op in self.ops.iter().rev() {
            match *op {
                Op::Conv(i) => {
                    let geo = &self.geometry[i];
                    let (kernel_grad, rest) = grads.groups[2 * i..].split_at_mut(1);
                    let mut input_grad = (i > 0).then(|| vec![0.0; geo.in_sample_len()]);
                    geo.backward_sample(
                        &self.convs[i],
                        &pass.cols[i],
                        &g,
                        &mut kernel_grad[0],
                        &mut rest[0],
                        input_grad.as_deref_mut(),
                    );
                    match input_grad {
                        Some(ig) => g = ig,
                        None => break,
                    }
                }
                Op::Relu => {
                    relu_i -= 1;
                    for (v, &m) in g.iter_mut().zip(&pass.relu_masks[relu_i]) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                }
                Op::Pool => {
                    pool_i -= 1;
                    let idx = &pass.pools[pool_i];
                    let gt = Tensor::from_parts(vec![idx.argmax.len()], g)?;
                    g = maxpool2x2_backward(idx, &gt)?.into_data();
                }
            }
        }
        Ok(())
    }

    /// Binary checkpoint: magic, version, JSON architecture, then for each
    /// layer the kernel shape and values followed by the bias, all
    /// little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("network config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.convs.len() as u32).to_le_bytes());
        for p in &self.convs {
            out.extend_from_slice(&(p.kernel.rank() as u32).to_le_bytes());
            for &d in p.kernel.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.kernel.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(p.bias.len() as u32).to_le_bytes());
            for v in &p.bias {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let invalid = |message: String| Error::Invalid {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| invalid("truncated header".into()))? != CHECKPOINT_MAGIC {
            return Err(invalid("not a network checkpoint".into()));
        }
        let truncated = || invalid("truncated checkpoint".into());
        let version = r.u32().ok_or_else(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.u32().ok_or_else(truncated)? as usize;
        let json = r.take(json_len).ok_or_else(truncated)?;
        let config: NetworkConfig =
            serde_json::from_slice(json).map_err(|e| invalid(format!("bad architecture record: {e}")))?;
        let mut net = Network::zeroed(config).map_err(|e| invalid(e.to_string()))?;
        let layers = r.u32().ok_or_else(truncated)? as usize;
        if layers != net.convs.len() {
            return Err(invalid(format!("{layers} layers stored, architecture has {}", net.convs.len())));
        }
        for (i, p) in net.convs.iter_mut().enumerate() {
            let rank = r.u32().ok_or_else(truncated)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize).ok_or_else(truncated))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.kernel.shape() {
                return Err(invalid(format!(
                    "layer {i}: stored kernel {shape:?}, expected {:?}",
                    p.kernel.shape()
                )));
            }
            for v in p.kernel.data_mut() {
                *v = r.f64().ok_or_else(truncated)?;
            }
            let bias_len = r.u32().ok_or_else(truncated)? as usize;
            if bias_len != p.bias.len() {
                return Err(invalid(format!("layer {i}: stored bias length {bias_len}, expected {}", p.bias.len())));
            }
            for v in p.bias.iter_mut() {
                *v = r.f64().ok_or_else(truncated)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(i) = net.parameters().iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite parameter at index {i}")));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes() {
        let net = Network::build(NetworkConfig::new(4), 1).unwrap();
        let cam = net.forward_cam(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!((cam.classes(), cam.height(), cam.width()), (4, 8, 8));
        assert!(cam.tensor().is_finite());

        let cfg = NetworkConfig {
            input_width: 12,
            input_height: 10,
            class_count: 1,
            block_widths: vec![4],
            head_width: 4,
            ..NetworkConfig::new(1)
        };
        let cam = Network::build(cfg, 1).unwrap().forward_cam(&Tensor::zeros(&[3, 10, 12])).unwrap();
        assert_eq!((cam.classes(), cam.height(), cam.width()), (1, 5, 6));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = NetworkConfig {
            input_width: 60,
            ..NetworkConfig::new(4)
        };
        assert!(matches!(Network::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Network::build(NetworkConfig::new(2), 9).unwrap();
        let b = Network::build(NetworkConfig::new(2), 9).unwrap();
        let c = Network::build(NetworkConfig::new(2), 10).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn wrong_image_shape() {
        let net = Network::build(NetworkConfig::new(2), 0).unwrap();
        assert!(net.forward_cam(&Tensor::zeros(&[1, 64, 64])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::build(NetworkConfig::new(3), 4).unwrap();
        let bytes = net.to_checkpoint_bytes();
        let back = Network::from_checkpoint_bytes(&bytes, Path::new("ck")).unwrap();
        assert_eq!(net, back);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(Network::from_checkpoint_bytes(&bytes[..bytes.len() - 3], Path::new("ck")).is_err());
        assert!(Network::from_checkpoint_bytes(b"garbage!", Path::new("ck")).is_err());
    }
}
