//! The toy grayscale restoration network: conv feature extractor, a chain
//! of key-graph transformer stages, and a conv reconstructor behind a global
//! residual. Includes the binary checkpoint format.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Backend;
use crate::block::{init_weight, stage_forward, StageParams, StageVars};
use crate::error::{CheckpointError, KgtError, Result};
use crate::numerics::{Parameter, Real, Tensor, Var};
use crate::train::TopkSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KGT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and initialization knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: usize,
    pub n_stages: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub window: usize,
    pub ffn_ratio: usize,
    /// Top-k schedule the net is trained under; its largest value doubles as
    /// the default inference k.
    pub schedule: TopkSchedule,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            n_stages: 2,
            n_layers: 2,
            heads: 2,
            window: 8,
            ffn_ratio: 2,
            schedule: TopkSchedule::default(),
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Collect every violated constraint into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 {
            problems.push("channels must be >= 1".to_string());
        }
        if self.heads == 0 || self.channels % self.heads.max(1) != 0 {
            problems.push(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.window < 2 {
            problems.push(format!("window {} must be >= 2", self.window));
        }
        if self.n_stages == 0 {
            problems.push("stages must be >= 1".to_string());
        }
        if self.n_layers == 0 {
            problems.push("layers must be >= 1".to_string());
        }
        if self.ffn_ratio == 0 {
            problems.push("ffn_ratio must be >= 1".to_string());
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(KgtError::Config(problems.join("; ")))
        }
    }

    /// Canonical key-value snapshot embedded in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "channels = {}\nstages = {}\nlayers = {}\nheads = {}\nwindow = {}\nffn_ratio = {}\nschedule = {}\nseed = {}\n",
            self.channels,
            self.n_stages,
            self.n_layers,
            self.heads,
            self.window,
            self.ffn_ratio,
            self.schedule,
            self.seed
        )
    }

    pub fn default_k(&self) -> usize {
        self.schedule.max_k()
    }
}

/// All parameters of the network.
#[derive(Clone, Debug)]
pub struct Net<R: Real = f32> {
    pub cfg: NetConfig,
    pub extract_w: Parameter<R>,
    pub extract_b: Parameter<R>,
    pub stages: Vec<StageParams<R>>,
    pub recon_w: Parameter<R>,
    pub recon_b: Parameter<R>,
}

/// Traced mirror used during forward passes; leaves are trainable when built
/// with [`Net::trace`] and constant when built with [`Net::trace_frozen`].
pub struct NetVars<R: Real = f32> {
    pub window: usize,
    pub extract_w: Var<R>,
    pub extract_b: Var<R>,
    pub stages: Vec<StageVars<R>>,
    pub recon_w: Var<R>,
    pub recon_b: Var<R>,
}

impl<R: Real> Net<R> {
    /// Fresh network. Projections, FFNs, and the extractor draw from a
    /// truncated normal; all biases, every stage tail conv, every attention
    /// `w_out`, and the reconstructor start at zero, so the whole net is
    /// exactly the identity map at initialization.
    pub fn init(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let extract_w = Parameter::new("extract.w", init_weight(&[c, 1, 3, 3], &mut rng));
        let extract_b = Parameter::new("extract.b", Tensor::zeros(&[c]));
        let stages = (0..cfg.n_stages)
            .map(|s| {
                StageParams::init(
                    c,
                    cfg.heads,
                    cfg.ffn_ratio,
                    cfg.n_layers,
                    cfg.default_k(),
                    &format!("stage{s}"),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            extract_w,
            extract_b,
            stages,
            recon_w: Parameter::new("recon.w", Tensor::zeros(&[1, c, 3, 3])),
            recon_b: Parameter::new("recon.b", Tensor::zeros(&[1])),
        })
    }

    /// Every parameter in a fixed enumeration order (matches `trace` /
    /// `collect_grads` and the checkpoint layout).
    pub fn params(&self) -> Vec<&Parameter<R>> {
        let mut out = vec![&self.extract_w, &self.extract_b];
        for s in &self.stages {
            for l in &s.layers {
                out.extend([
                    &l.attn.w_qry,
                    &l.attn.w_key,
                    &l.attn.w_val,
                    &l.attn.w_out,
                    &l.norm1.gamma,
                    &l.norm1.beta,
                    &l.norm2.gamma,
                    &l.norm2.beta,
                    &l.ffn_w1,
                    &l.ffn_w2,
                ]);
            }
            out.extend([&s.tail_w, &s.tail_b]);
        }
        out.extend([&self.recon_w, &self.recon_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<R>> {
        let mut out: Vec<&mut Parameter<R>> = vec![&mut self.extract_w, &mut self.extract_b];
        for s in &mut self.stages {
            for l in &mut s.layers {
                out.extend([
                    &mut l.attn.w_qry,
                    &mut l.attn.w_key,
                    &mut l.attn.w_val,
                    &mut l.attn.w_out,
                    &mut l.norm1.gamma,
                    &mut l.norm1.beta,
                    &mut l.norm2.gamma,
                    &mut l.norm2.beta,
                    &mut l.ffn_w1,
                    &mut l.ffn_w2,
                ]);
            }
            out.extend([&mut s.tail_w, &mut s.tail_b]);
        }
        out.extend([&mut self.recon_w, &mut self.recon_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn trace_with(&self, mk: fn(Tensor<R>) -> Var<R>) -> NetVars<R> {
        NetVars {
            window: self.cfg.window,
            extract_w: mk(self.extract_w.value.clone()),
            extract_b: mk(self.extract_b.value.clone()),
            stages: self.stages.iter().map(|s| s.trace_with(mk)).collect(),
            recon_w: mk(self.recon_w.value.clone()),
            recon_b: mk(self.recon_b.value.clone()),
        }
    }

    /// Trainable trace: leaves accumulate gradients.
    pub fn trace(&self) -> NetVars<R> {
        self.trace_with(Var::param)
    }

    /// Frozen trace: nothing is recorded, forward passes stay lean.
    pub fn trace_frozen(&self) -> NetVars<R> {
        self.trace_with(Var::constant)
    }

    /// Inference entry point. The output is not clamped; clamping to [0,1]
    /// happens only at image export.
    pub fn forward(&self, image: &Tensor<R>, k: usize, backend: Backend) -> Result<Tensor<R>> {
        if image.check_finite("model input").is_err() {
            return Err(KgtError::Input("non-finite input image".into()));
        }
        let vars = self.trace_frozen();
        let out = forward_vars(&vars, &Var::constant(image.clone()), k, backend)?;
        Ok(out.value().clone())
    }
}

impl<R: Real> NetVars<R> {
    /// Parameter leaves in the same order as [`Net::params`].
    pub fn param_vars(&self) -> Vec<&Var<R>> {
        let mut out = vec![&self.extract_w, &self.extract_b];
        for s in &self.stages {
            for l in &s.layers {
                out.extend([
                    &l.attn.w_qry,
                    &l.attn.w_key,
                    &l.attn.w_val,
                    &l.attn.w_out,
                    &l.norm1.gamma,
                    &l.norm1.beta,
                    &l.norm2.gamma,
                    &l.norm2.beta,
                    &l.ffn_w1,
                    &l.ffn_w2,
                ]);
            }
            out.extend([&s.tail_w, &s.tail_b]);
        }
        out.extend([&self.recon_w, &self.recon_b]);
        out
    }

    /// Gradients accumulated by the latest backward, ordered like
    /// [`Net::params`]; zeros where a leaf never received one.
    pub fn collect_grads(&self) -> Vec<Tensor<R>> {
        self.param_vars()
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Whole-network forward: `image + recon(stages(extract(image)))`.
pub fn forward_vars<R: Real>(
    vars: &NetVars<R>,
    image: &Var<R>,
    k: usize,
    backend: Backend,
) -> Result<Var<R>> {
    if k == 0 {
        return Err(KgtError::Config("k must be >= 1".into()));
    }
    if image.shape().len() != 3 || image.shape()[0] != 1 {
        return Err(KgtError::Dim {
            context: "model forward",
            detail: format!("expected [1,H,W] image, got {:?}", image.shape()),
        });
    }
    let mut f = image.conv2d_3x3(&vars.extract_w, &vars.extract_b)?;
    for stage in &vars.stages {
        f = stage_forward(&f, stage, k, vars.window, backend)?;
    }
    image.add(&f.conv2d_3x3(&vars.recon_w, &vars.recon_b)?)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// Little-endian layout:
//   magic "KGT1"
//   u32 version (= 1)
//   u32 config length, UTF-8 config text
//   u32 tensor count
//   per tensor: u16 name length, name bytes, u8 dtype (0 = f32),
//               u8 rank, u32 dims[rank], raw f32 data

impl Net<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.cfg.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(0u8); // dtype 0 = f32
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version }.into());
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CheckpointError::Mismatch("config text is not UTF-8".into()))?;
        let cfg = crate::config::Config::parse(cfg_text)?.net_config()?;
        let mut net = Net::init(&cfg)?;

        let count = r.u32()? as usize;
        let mut by_name: std::collections::HashMap<String, &mut Parameter<f32>> = net
            .params_mut()
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        if count != by_name.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} tensors, config implies {}",
                count,
                by_name.len()
            ))
            .into());
        }
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Mismatch("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(
                    CheckpointError::Mismatch(format!("unknown dtype code {dtype}")).into(),
                );
            }
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let p = by_name
                .get_mut(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor '{name}'")))?;
            if p.value.shape() != dims.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor '{name}' has shape {:?}, config implies {:?}",
                    dims,
                    p.value.shape()
                ))
                .into());
            }
            p.value = Tensor::new(&dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} trailing bytes after tensor table",
                bytes.len() - r.pos
            ))
            .into());
        }
        Ok(net)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.pos }.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> NetConfig {
        NetConfig {
            channels: 8,
            n_stages: 2,
            n_layers: 2,
            heads: 2,
            window: 4,
            ffn_ratio: 2,
            schedule: TopkSchedule::Random(vec![2, 4, 8]),
            seed: 7,
        }
    }

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = Net::<f32>::init(&small_cfg()).unwrap();
        let b = Net::<f32>::init(&small_cfg()).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value.data(), y.value.data());
            assert_eq!(x.name, y.name);
        }
    }

    #[test]
    fn identity_at_init_is_exact() {
        let net = Net::init(&small_cfg()).unwrap();
        let img = rand_img(13, 9, 1);
        let out = net.forward(&img, 4, Backend::Gather).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn parameter_count_matches_enumeration_oracle() {
        // closed form for the defaults (C=32, 2 stages x 2 layers, r=2, heads=2)
        let cfg = NetConfig::default();
        let net = Net::<f32>::init(&cfg).unwrap();
        let c = cfg.channels;
        let per_layer = 4 * c * c        // projections + w_out
            + 4 * c                      // two affine norm pairs
            + c * (cfg.ffn_ratio * c)    // ffn_w1
            + (cfg.ffn_ratio * c) * c; // ffn_w2
        let per_stage = cfg.n_layers * per_layer + c * c * 9 + c;
        let closed_form = (c * 9 + c)                 // extractor
            + cfg.n_stages * per_stage
            + (c * 9 + 1); // reconstructor
        assert_eq!(net.param_count(), closed_form);

        // enumeration oracle: walk the parameter list independently
        let enumerated: usize = net.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(enumerated, closed_form);
        // names must be unique for the checkpoint table
        let mut names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), net.params().len());
    }

    #[test]
    fn forward_shape_contract_and_small_inputs() {
        let net = Net::init(&small_cfg()).unwrap();
        for (h, w) in [(17usize, 17usize), (32, 32), (3, 5)] {
            let img = rand_img(h, w, (h + w) as u64);
            let out = net.forward(&img, 4, Backend::Streaming { block: 3 }).unwrap();
            assert_eq!(out.shape(), &[1, h, w]);
        }
    }

    #[test]
    fn every_k_in_range_works_on_a_fixed_net() {
        let net = Net::init(&small_cfg()).unwrap();
        let img = rand_img(8, 8, 3);
        let hw = net.cfg.window * net.cfg.window;
        for k in 1..hw {
            net.forward(&img, k, Backend::Gather).unwrap();
        }
        assert!(net.forward(&img, 0, Backend::Gather).is_err());
    }

    #[test]
    fn non_finite_input_is_input_error() {
        let net = Net::init(&small_cfg()).unwrap();
        let mut img = rand_img(8, 8, 4);
        img.data_mut()[3] = f32::NAN;
        assert!(matches!(
            net.forward(&img, 2, Backend::Gather),
            Err(KgtError::Input(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let mut net = Net::init(&small_cfg()).unwrap();
        // make weights non-trivial
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for p in net.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0));
        }
        let bytes = net.to_bytes();
        let reloaded = Net::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes, "save -> load -> save must be stable");

        let img = rand_img(10, 12, 5);
        let a = net.forward(&img, 3, Backend::Mask).unwrap();
        let b = reloaded.forward(&img, 3, Backend::Mask).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn checkpoint_error_taxonomy() {
        let net = Net::init(&small_cfg()).unwrap();
        let mut bytes = net.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Net::from_bytes(&bad_magic),
            Err(KgtError::Checkpoint(CheckpointError::BadMagic))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Net::from_bytes(&bad_version),
            Err(KgtError::Checkpoint(CheckpointError::Version { found: 9 }))
        ));

        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Net::from_bytes(&bytes),
            Err(KgtError::Checkpoint(CheckpointError::Truncated { .. }))
        ));
    }

    #[test]
    fn checkpoint_size_matches_format_oracle() {
        let net = Net::init(&small_cfg()).unwrap();
        let bytes = net.to_bytes();
        let cfg_len = net.cfg.to_text().len();
        let tensor_table: usize = net
            .params()
            .iter()
            .map(|p| 2 + p.name.len() + 1 + 1 + 4 * p.value.shape().len() + 4 * p.value.numel())
            .sum();
        assert_eq!(bytes.len(), 4 + 4 + 4 + cfg_len + 4 + tensor_table);
    }

    #[test]
    fn invalid_config_lists_all_violations() {
        let cfg = NetConfig {
            channels: 9,
            heads: 2,
            window: 1,
            n_stages: 0,
            ..NetConfig::default()
        };
        let err = Net::<f32>::init(&cfg).unwrap_err().to_string();
        assert!(err.contains("divisible"));
        assert!(err.contains("window"));
        assert!(err.contains("stages"));
    }
}
