//! Time-conditioned noise predictor: a terrain prior encoder built from
//! deformable convolutions feeds a U-Net of efficient attention blocks.
//!
//! The encoder trunk is `conv1x1([mu, x_t])`; the terrain prior path starts
//! behind a zero-initialized projection, so at initialization the output
//! depends on the trunk alone.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::bicubic_scale;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::nn::layers::{
    upsample_nearest2, upsample_nearest2_backward, ChannelAttention, Conv2d, DeformConv2d,
    DepthwiseConv2d, Gelu, LayerNorm2d, Linear, Module, Padding, Sca, SimpleGate,
};
use crate::nn::{gelu_grad, time_embedding, ParamVisitor, Tensor};
use crate::rng::rng_from_seed;
use crate::sde::ScheduleSpec;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub tpe_channels: usize,
    pub tpe_blocks: usize,
    pub encoder_blocks: Vec<usize>,
    pub decoder_blocks: Vec<usize>,
    pub depths: usize,
    pub time_embed_dim: usize,
    pub dwc_kernels: [usize; 3],
}

impl DenoiserConfig {
    /// Desk-scale model for CPU experiments.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            tpe_channels: 4,
            tpe_blocks: 3,
            encoder_blocks: vec![1, 1, 1],
            decoder_blocks: vec![1, 1, 1],
            depths: 3,
            time_embed_dim: 64,
            dwc_kernels: [3, 5, 7],
        }
    }

    /// Full-scale configuration (64 channels, 4 depths, 4-1-1-1 encoder).
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            tpe_channels: 4,
            tpe_blocks: 3,
            encoder_blocks: vec![4, 1, 1, 1],
            decoder_blocks: vec![1, 1, 1, 1],
            depths: 4,
            time_embed_dim: 256,
            dwc_kernels: [3, 5, 7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths == 0 {
            return Err(Error::BadParam("depths must be >= 1".into()));
        }
        if self.encoder_blocks.len() != self.depths || self.decoder_blocks.len() != self.depths {
            return Err(Error::BadParam(format!(
                "encoder/decoder block lists must have length depths={}",
                self.depths
            )));
        }
        if self.encoder_blocks.iter().chain(&self.decoder_blocks).any(|n| *n == 0) {
            return Err(Error::BadParam("all block counts must be >= 1".into()));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::BadParam("base_channels must be positive and even".into()));
        }
        if self.tpe_channels == 0 || self.tpe_blocks == 0 {
            return Err(Error::BadParam("tpe_channels and tpe_blocks must be >= 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::BadParam("time_embed_dim must be positive and even".into()));
        }
        if self.dwc_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::BadParam("dwc kernels must be odd".into()));
        }
        Ok(())
    }

    fn channels_at(&self, depth: usize) -> usize {
        self.base_channels << depth
    }

    /// Spatial granularity the U-Net requires of its inputs.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depths - 1)
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

// ---------------------------------------------------------------------------
// Terrain attention block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Tab {
    d1: DeformConv2d,
    act: Gelu,
    d2: DeformConv2d,
    cab: ChannelAttention,
}

impl Tab {
    fn new(c: usize, rng: &mut crate::rng::SeedRng) -> Self {
        Self {
            d1: DeformConv2d::new(c, c, 3, rng),
            act: Gelu::default(),
            d2: DeformConv2d::new(c, c, 3, rng),
            cab: ChannelAttention::new(c, 2, rng),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.d1.forward(x);
        let h = self.act.forward(&h);
        let h = self.d2.forward(&h);
        let mut out = self.cab.forward(&h);
        out.add_assign(x);
        out
    }

    fn backward(&mut self, gout: &Tensor) -> Tensor {
        let g = self.cab.backward(gout);
        let g = self.d2.backward(&g);
        let g = self.act.backward(&g);
        let mut gx = self.d1.backward(&g);
        gx.add_assign(gout);
        gx
    }
}

impl Module for Tab {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.d1.visit_params(&format!("{prefix}.dconv1"), f);
        self.d2.visit_params(&format!("{prefix}.dconv2"), f);
        self.cab.visit_params(&format!("{prefix}.cab"), f);
    }
}

// ---------------------------------------------------------------------------
// Terrain prior encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Tpe {
    conv_in: Conv2d,
    tabs: Vec<Tab>,
    proj: Conv2d,
}

impl Tpe {
    fn new(config: &DenoiserConfig, rng: &mut crate::rng::SeedRng) -> Self {
        Self {
            conv_in: Conv2d::new(1, config.tpe_channels, 3, 1, 1, Padding::Zero, rng),
            tabs: (0..config.tpe_blocks).map(|_| Tab::new(config.tpe_channels, rng)).collect(),
            proj: Conv2d::new_zero(config.tpe_channels, config.base_channels, 1, 1, 0, Padding::Zero),
        }
    }

    pub fn forward(&mut self, lift: &Tensor) -> Tensor {
        let mut x = self.conv_in.forward(lift);
        for tab in &mut self.tabs {
            x = tab.forward(&x);
        }
        self.proj.forward(&x)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g = self.proj.backward(gout);
        for tab in self.tabs.iter_mut().rev() {
            g = tab.backward(&g);
        }
        self.conv_in.backward(&g)
    }
}

impl Module for Tpe {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.conv_in.visit_params(&format!("{prefix}.in"), f);
        for (i, tab) in self.tabs.iter_mut().enumerate() {
            tab.visit_params(&format!("{prefix}.tab{i}"), f);
        }
        self.proj.visit_params(&format!("{prefix}.proj"), f);
    }
}

// ---------------------------------------------------------------------------
// Timestep modulation
// ---------------------------------------------------------------------------

/// Two-layer MLP on the sinusoidal timestep encoding, emitting per-channel
/// modulation coefficients. `alpha = 1 + raw` so modulation is the identity
/// at the zero init of the output layer.
#[derive(Debug, Clone)]
struct TimeMlp {
    dim: usize,
    c: usize,
    l1: Linear,
    l2: Linear,
    cache_h1: Option<Vec<f64>>,
}

impl TimeMlp {
    fn new(dim: usize, c: usize, rng: &mut crate::rng::SeedRng) -> Self {
        Self {
            dim,
            c,
            l1: Linear::new(dim, dim, rng),
            l2: Linear::new_zero(dim, 2 * c),
            cache_h1: None,
        }
    }

    fn forward(&mut self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let e = time_embedding(i, self.dim);
        let h1 = self.l1.forward(&e);
        let h1g: Vec<f64> = h1.iter().map(|v| crate::nn::gelu(*v)).collect();
        let raw = self.l2.forward(&h1g);
        let alpha: Vec<f64> = raw[..self.c].iter().map(|r| 1.0 + r).collect();
        let beta: Vec<f64> = raw[self.c..].to_vec();
        self.cache_h1 = Some(h1);
        (alpha, beta)
    }

    fn backward(&mut self, dalpha: &[f64], dbeta: &[f64]) {
        let h1 = self.cache_h1.take().expect("forward before backward");
        let mut draw = Vec::with_capacity(2 * self.c);
        draw.extend_from_slice(dalpha);
        draw.extend_from_slice(dbeta);
        let dh1g = self.l2.backward(&draw);
        let dh1: Vec<f64> = dh1g.iter().zip(h1.iter()).map(|(d, v)| d * gelu_grad(*v)).collect();
        self.l1.backward(&dh1);
    }
}

impl Module for TimeMlp {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.l1.visit_params(&format!("{prefix}.l1"), f);
        self.l2.visit_params(&format!("{prefix}.l2"), f);
    }
}

// ---------------------------------------------------------------------------
// Efficient attention block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Eab {
    c: usize,
    ln: LayerNorm2d,
    tmlp: TimeMlp,
    conv_in: Conv2d,
    dwc: Vec<DepthwiseConv2d>,
    sg: SimpleGate,
    sca: Sca,
    proj: Conv2d,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl Eab {
    fn new(c: usize, config: &DenoiserConfig, rng: &mut crate::rng::SeedRng) -> Self {
        let gated = 3 * c / 2;
        Self {
            c,
            ln: LayerNorm2d::new(c),
            tmlp: TimeMlp::new(config.time_embed_dim, c, rng),
            conv_in: Conv2d::new(c, c, 1, 1, 0, Padding::Zero, rng),
            dwc: config.dwc_kernels.iter().map(|k| DepthwiseConv2d::new(c, *k, rng)).collect(),
            sg: SimpleGate::default(),
            sca: Sca::new(gated, rng),
            proj: Conv2d::new_zero(gated, c, 1, 1, 0, Padding::Zero),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, i: usize) -> Tensor {
        let (alpha, beta) = self.tmlp.forward(i);
        let n = self.ln.forward(x);
        let plane = n.h * n.w;
        let mut modulated = n.clone();
        for c in 0..self.c {
            for v in modulated.data[c * plane..(c + 1) * plane].iter_mut() {
                *v = alpha[c] * *v + beta[c];
            }
        }
        let f = self.conv_in.forward(&modulated);
        let ms: Vec<Tensor> = self.dwc.iter_mut().map(|d| d.forward(&f)).collect();
        let cat = Tensor::concat(&[&ms[0], &ms[1], &ms[2]]);
        let g = self.sg.forward(&cat);
        let a = self.sca.forward(&g);
        let mut out = self.proj.forward(&a);
        out.add_assign(x);
        self.cache = Some((n, alpha));
        out
    }

    fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (n, alpha) = self.cache.take().expect("forward before backward");
        let ga = self.proj.backward(gout);
        let gg = self.sca.backward(&ga);
        let gcat = self.sg.backward(&gg);
        let (g0, rest) = gcat.split(self.c);
        let (g1, g2) = rest.split(self.c);
        let mut gf = self.dwc[0].backward(&g0);
        gf.add_assign(&self.dwc[1].backward(&g1));
        gf.add_assign(&self.dwc[2].backward(&g2));
        let gmod = self.conv_in.backward(&gf);

        let plane = n.h * n.w;
        let mut dalpha = vec![0.0; self.c];
        let mut dbeta = vec![0.0; self.c];
        let mut gn = gmod.clone();
        for c in 0..self.c {
            let gm = &gmod.data[c * plane..(c + 1) * plane];
            let ns = &n.data[c * plane..(c + 1) * plane];
            let mut da = 0.0;
            let mut db = 0.0;
            for ((g, nv), out) in gm
                .iter()
                .zip(ns.iter())
                .zip(gn.data[c * plane..(c + 1) * plane].iter_mut())
            {
                da += g * nv;
                db += g;
                *out = g * alpha[c];
            }
            dalpha[c] = da;
            dbeta[c] = db;
        }
        self.tmlp.backward(&dalpha, &dbeta);
        let mut gx = self.ln.backward(&gn);
        gx.add_assign(gout);
        gx
    }
}

impl Module for Eab {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.ln.visit_params(&format!("{prefix}.ln"), f);
        self.tmlp.visit_params(&format!("{prefix}.time"), f);
        self.conv_in.visit_params(&format!("{prefix}.conv_in"), f);
        for (i, d) in self.dwc.iter_mut().enumerate() {
            d.visit_params(&format!("{prefix}.dwc{i}"), f);
        }
        self.sca.visit_params(&format!("{prefix}.sca"), f);
        self.proj.visit_params(&format!("{prefix}.proj"), f);
    }
}

// ---------------------------------------------------------------------------
// U-Net body
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Unet {
    depths: usize,
    enc: Vec<Vec<Eab>>,
    downs: Vec<Conv2d>,
    mid_dec: Vec<Eab>,
    up_convs: Vec<Conv2d>,
    fuses: Vec<Conv2d>,
    dec: Vec<Vec<Eab>>,
    skip_dims: Vec<usize>,
}

impl Unet {
    fn new(config: &DenoiserConfig, rng: &mut crate::rng::SeedRng) -> Self {
        let depths = config.depths;
        let enc = (0..depths)
            .map(|d| {
                (0..config.encoder_blocks[d])
                    .map(|_| Eab::new(config.channels_at(d), config, rng))
                    .collect()
            })
            .collect();
        let downs = (0..depths.saturating_sub(1))
            .map(|d| {
                Conv2d::new(
                    config.channels_at(d),
                    config.channels_at(d + 1),
                    2,
                    2,
                    0,
                    Padding::Zero,
                    rng,
                )
            })
            .collect();
        let mid_dec = (0..config.decoder_blocks[depths - 1])
            .map(|_| Eab::new(config.channels_at(depths - 1), config, rng))
            .collect();
        let up_convs = (0..depths.saturating_sub(1))
            .map(|d| {
                Conv2d::new(
                    config.channels_at(d + 1),
                    config.channels_at(d),
                    1,
                    1,
                    0,
                    Padding::Zero,
                    rng,
                )
            })
            .collect();
        let fuses = (0..depths.saturating_sub(1))
            .map(|d| {
                Conv2d::new(
                    2 * config.channels_at(d),
                    config.channels_at(d),
                    1,
                    1,
                    0,
                    Padding::Zero,
                    rng,
                )
            })
            .collect();
        let dec = (0..depths.saturating_sub(1))
            .map(|d| {
                (0..config.decoder_blocks[d])
                    .map(|_| Eab::new(config.channels_at(d), config, rng))
                    .collect()
            })
            .collect();
        let skip_dims = (0..depths.saturating_sub(1)).map(|d| config.channels_at(d)).collect();
        Self {
            depths,
            enc,
            downs,
            mid_dec,
            up_convs,
            fuses,
            dec,
            skip_dims,
        }
    }

    fn forward(&mut self, feat: &Tensor, i: usize) -> Tensor {
        let mut x = feat.clone();
        for d in 0..self.depths - 1 {
            for blk in &mut self.enc[d] {
                x = blk.forward(&x, i);
            }
            let skip = x.clone();
            x = self.downs[d].forward(&skip);
            // Skip tensors are re-materialized in backward from the fuse
            // convs' own caches; nothing else to retain here.
        }
        for blk in &mut self.enc[self.depths - 1] {
            x = blk.forward(&x, i);
        }
        for blk in &mut self.mid_dec {
            x = blk.forward(&x, i);
        }
        for d in (0..self.depths - 1).rev() {
            let up = upsample_nearest2(&x);
            let up = self.up_convs[d].forward(&up);
            // Recover the encoder-side skip: downs[d] cached its input.
            let skip = self.downs[d]
                .cached_input()
                .expect("encoder pass populated the cache")
                .clone();
            let cat = Tensor::concat(&[&up, &skip]);
            x = self.fuses[d].forward(&cat);
            for blk in &mut self.dec[d] {
                x = blk.forward(&x, i);
            }
        }
        x
    }

    fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g = gout.clone();
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.depths.saturating_sub(1)];
        for d in 0..self.depths - 1 {
            for blk in self.dec[d].iter_mut().rev() {
                g = blk.backward(&g);
            }
            let gcat = self.fuses[d].backward(&g);
            let (gup, gskip) = gcat.split(self.skip_dims[d]);
            skip_grads[d] = Some(gskip);
            let gup = self.up_convs[d].backward(&gup);
            g = upsample_nearest2_backward(&gup);
        }
        for blk in self.mid_dec.iter_mut().rev() {
            g = blk.backward(&g);
        }
        for blk in self.enc[self.depths - 1].iter_mut().rev() {
            g = blk.backward(&g);
        }
        for d in (0..self.depths - 1).rev() {
            g = self.downs[d].backward(&g);
            g.add_assign(skip_grads[d].take().as_ref().unwrap());
            for blk in self.enc[d].iter_mut().rev() {
                g = blk.backward(&g);
            }
        }
        g
    }
}

impl Module for Unet {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        for (d, blocks) in self.enc.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                blk.visit_params(&format!("{prefix}.enc{d}.b{b}"), f);
            }
        }
        for (d, down) in self.downs.iter_mut().enumerate() {
            down.visit_params(&format!("{prefix}.down{d}"), f);
        }
        for (b, blk) in self.mid_dec.iter_mut().enumerate() {
            blk.visit_params(&format!("{prefix}.mid.b{b}"), f);
        }
        for (d, up) in self.up_convs.iter_mut().enumerate() {
            up.visit_params(&format!("{prefix}.up{d}"), f);
        }
        for (d, fuse) in self.fuses.iter_mut().enumerate() {
            fuse.visit_params(&format!("{prefix}.fuse{d}"), f);
        }
        for (d, blocks) in self.dec.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                blk.visit_params(&format!("{prefix}.dec{d}.b{b}"), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Full predictor
// ---------------------------------------------------------------------------

/// The noise predictor `(state, degraded input, conditional mean, timestep)
/// -> predicted noise`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    tpe: Tpe,
    trunk: Conv2d,
    unet: Unet,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        Ok(Self {
            tpe: Tpe::new(&config, &mut rng),
            trunk: Conv2d::new(2, config.base_channels, 1, 1, 0, Padding::Zero, &mut rng),
            unet: Unet::new(&config, &mut rng),
            out_conv: Conv2d::new(config.base_channels, 1, 3, 1, 1, Padding::Zero, &mut rng),
            config,
        })
    }

    fn check_dims(&self, x_t: &Grid2<f64>, v_lq: &Grid2<f64>, mu: &Grid2<f64>) -> Result<usize> {
        if !x_t.same_dims(mu) {
            return Err(Error::ShapeMismatch(format!(
                "state {}x{} vs mu {}x{}",
                x_t.rows(),
                x_t.cols(),
                mu.rows(),
                mu.cols()
            )));
        }
        if v_lq.rows() == 0 || mu.rows() % v_lq.rows() != 0 || mu.cols() % v_lq.cols() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "degraded input {}x{} does not divide state {}x{}",
                v_lq.rows(),
                v_lq.cols(),
                mu.rows(),
                mu.cols()
            )));
        }
        let scale = mu.rows() / v_lq.rows();
        if mu.cols() / v_lq.cols() != scale {
            return Err(Error::ShapeMismatch("anisotropic scale".into()));
        }
        let m = self.config.spatial_multiple();
        if mu.rows() % m != 0 || mu.cols() % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "state dims {}x{} must be multiples of {m}",
                mu.rows(),
                mu.cols()
            )));
        }
        Ok(scale)
    }

    /// Forward pass: predicts the noise component of `x_t`.
    ///
    /// `v_lq` is the degraded patch at reduced resolution; it is lifted
    /// bicubically to state resolution before entering the terrain prior
    /// encoder. Caches activations for a subsequent [`Self::backward`].
    pub fn predict_noise(
        &mut self,
        x_t: &Grid2<f64>,
        v_lq: &Grid2<f64>,
        mu: &Grid2<f64>,
        i: usize,
    ) -> Result<Grid2<f64>> {
        let scale = self.check_dims(x_t, v_lq, mu)?;
        let lift = if scale == 1 {
            v_lq.clone()
        } else {
            bicubic_scale(v_lq, scale)
        };
        let prior = self.tpe.forward(&Tensor::from_grid(&lift));
        let trunk_in = Tensor::concat(&[&Tensor::from_grid(mu), &Tensor::from_grid(x_t)]);
        let mut feat = self.trunk.forward(&trunk_in);
        feat.add_assign(&prior);
        let body = self.unet.forward(&feat, i);
        let out = self.out_conv.forward(&body);
        Ok(out.to_grid())
    }

    /// Backpropagates `dL/d(noise_hat)`, accumulating parameter gradients.
    pub fn backward(&mut self, dnoise: &Grid2<f64>) {
        let g = self.out_conv.backward(&Tensor::from_grid(dnoise));
        let gfeat = self.unet.backward(&g);
        // The feature map is the sum of trunk and prior paths; the gradient
        // forks to both. Input gradients are discarded at the leaves.
        self.trunk.backward(&gfeat);
        self.tpe.backward(&gfeat);
    }

    /// Direct access to the terrain prior encoder (ablations and tests).
    pub fn tpe_mut(&mut self) -> &mut Tpe {
        &mut self.tpe
    }
}

impl Module for Denoiser {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.tpe.visit_params(&p("tpe"), f);
        self.trunk.visit_params(&p("trunk"), f);
        self.unet.visit_params(&p("unet"), f);
        self.out_conv.visit_params(&p("out"), f);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"DMRCKP01";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: DenoiserConfig,
    schedule: ScheduleSpec,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes a named-tensor checkpoint: versioned magic header, JSON manifest,
/// then raw f64 little-endian data in manifest order.
pub fn save_checkpoint(
    model: &mut Denoiser,
    schedule: &ScheduleSpec,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params("", &mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
        });
        for v in &p.w {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = CheckpointManifest {
        version: 1,
        config: model.config.clone(),
        schedule: *schedule,
        step,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&blob)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, ScheduleSpec, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(Error::Parse("truncated checkpoint manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| Error::Parse(format!("checkpoint manifest: {e}")))?;
    let mut model = Denoiser::new(manifest.config.clone(), 0)?;

    let mut offset = 16 + json_len;
    let mut by_name: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let need = n * 8;
        if bytes.len() < offset + need {
            return Err(Error::Parse(format!("truncated tensor {}", entry.name)));
        }
        let vals: Vec<f64> = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        by_name.insert(entry.name.clone(), vals);
        offset += need;
    }

    let mut missing = Vec::new();
    model.visit_params("", &mut |name, p| match by_name.remove(name) {
        Some(vals) if vals.len() == p.len() => p.w.copy_from_slice(&vals),
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Parse(format!(
            "checkpoint missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok((model, manifest.schedule, manifest.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::testutil::{fd_check_params, quad_loss, randomize_params};
    use crate::raster::{normalize, synth_terrain};
    use rand::Rng;

    fn toy_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            tpe_channels: 2,
            tpe_blocks: 1,
            encoder_blocks: vec![1, 1],
            decoder_blocks: vec![1, 1],
            depths: 2,
            time_embed_dim: 8,
            dwc_kernels: [3, 5, 7],
        }
    }

    fn test_inputs(hq: usize, scale: usize, seed: u64) -> (Grid2<f64>, Grid2<f64>, Grid2<f64>) {
        let g = synth_terrain(hq, hq, 0.6, seed).unwrap();
        let hq_patch = normalize(&g).unwrap();
        let lq = crate::degrade::downsample(&g, scale).unwrap();
        let lq_patch = crate::raster::normalize_with(&lq, hq_patch.record);
        let mu = crate::degrade::bicubic_scale(&lq_patch.values, scale);
        (hq_patch.values, lq_patch.values, mu)
    }

    #[test]
    fn output_shape_matches_state_shape() {
        for hq in [32, 64, 96] {
            let mut model = Denoiser::new(DenoiserConfig::desk(), 1).unwrap();
            let (x, v, mu) = test_inputs(hq, 2, 3);
            let out = model.predict_noise(&x, &v, &mu, 10).unwrap();
            assert_eq!((out.rows(), out.cols()), (hq, hq));
        }
    }

    #[test]
    fn all_zero_parameters_give_zero_output() {
        let mut model = Denoiser::new(toy_config(), 2).unwrap();
        model.visit_params("", &mut |_, p| p.w.iter_mut().for_each(|w| *w = 0.0));
        let (x, v, mu) = test_inputs(16, 2, 5);
        let out = model.predict_noise(&x, &v, &mu, 3).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tpe_is_inert_at_init() {
        // Zero-initialized TPE projection: perturbing TAB weights must not
        // change the output until training moves the projection off zero.
        let mut model = Denoiser::new(toy_config(), 7).unwrap();
        let (x, v, mu) = test_inputs(16, 2, 5);
        let before = model.predict_noise(&x, &v, &mu, 4).unwrap();
        model.visit_params("", &mut |name, p| {
            if name.contains(".tab") {
                p.w.iter_mut().for_each(|w| *w += 0.37);
            }
        });
        let after = model.predict_noise(&x, &v, &mu, 4).unwrap();
        assert_eq!(before.as_slice(), after.as_slice());
    }

    #[test]
    fn tpe_forward_shape_and_zero_proj() {
        let config = DenoiserConfig::desk();
        let mut model = Denoiser::new(config.clone(), 3).unwrap();
        let lift = Tensor::from_grid(&synth_terrain(16, 16, 0.5, 1).unwrap().values);
        let out = model.tpe_mut().forward(&lift);
        assert_eq!((out.c, out.h, out.w), (config.base_channels, 16, 16));
        // Zero-initialized projection: prior is exactly zero.
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_forward() {
        let mut m1 = Denoiser::new(toy_config(), 11).unwrap();
        let mut m2 = Denoiser::new(toy_config(), 11).unwrap();
        let (x, v, mu) = test_inputs(16, 2, 8);
        let a = m1.predict_noise(&x, &v, &mu, 6).unwrap();
        let b = m2.predict_noise(&x, &v, &mu, 6).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn full_network_gradients() {
        let mut rng = rng_from_seed(13);
        let mut model = Denoiser::new(toy_config(), 13).unwrap();
        randomize_params(&mut model, 0.3, &mut rng);
        let (x, v, mu) = test_inputs(8, 2, 9);
        let (xc, vc, muc) = (x.clone(), v.clone(), mu.clone());
        fd_check_params(
            &mut model,
            &mut |m| {
                let out = m.predict_noise(&xc, &vc, &muc, 5).unwrap();
                quad_loss(&Tensor::from_grid(&out))
            },
            &mut |m| {
                let out = m.predict_noise(&x, &v, &mu, 5).unwrap();
                m.backward(&out);
            },
            2,
            1e-4,
            &mut rng,
        );
    }

    #[test]
    fn tpe_gradients() {
        let mut rng = rng_from_seed(17);
        let config = toy_config();
        let mut model = Denoiser::new(config, 17).unwrap();
        randomize_params(&mut model, 0.3, &mut rng);
        let lift = {
            let g = synth_terrain(8, 8, 0.6, 2).unwrap();
            Tensor::from_grid(&normalize(&g).unwrap().values)
        };
        let liftc = lift.clone();
        fd_check_params(
            model.tpe_mut(),
            &mut |t| quad_loss(&t.forward(&liftc)),
            &mut |t| {
                let out = t.forward(&lift);
                t.backward(&out);
            },
            6,
            1e-4,
            &mut rng,
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut model = Denoiser::new(toy_config(), 1).unwrap();
        let (x, v, _) = test_inputs(16, 2, 3);
        let bad_mu = Grid2::filled(8, 8, 0.5f64);
        assert!(matches!(
            model.predict_noise(&x, &v, &bad_mu, 1),
            Err(Error::ShapeMismatch(_))
        ));
        // Non-multiple-of-granularity input.
        let odd = Grid2::filled(9, 9, 0.5f64);
        assert!(matches!(
            model.predict_noise(&odd, &odd.clone(), &odd.clone(), 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::desk();
        c.encoder_blocks = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::desk();
        c.base_channels = 15;
        assert!(c.validate().is_err());
        assert!(DenoiserConfig::desk().validate().is_ok());
        assert!(DenoiserConfig::full().validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("demres-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let mut rng = rng_from_seed(19);
        let mut model = Denoiser::new(toy_config(), 19).unwrap();
        randomize_params(&mut model, 0.5, &mut rng);
        let sched = ScheduleSpec::default();
        save_checkpoint(&mut model, &sched, 1234, &path).unwrap();

        let (mut loaded, sched2, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 1234);
        assert_eq!(sched, sched2);
        let (x, v, mu) = test_inputs(16, 2, 21);
        let a = model.predict_noise(&x, &v, &mu, 3).unwrap();
        let b = loaded.predict_noise(&x, &v, &mu, 3).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());

        // Corrupted magic is rejected.
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn param_count_is_stable() {
        let mut model = Denoiser::new(DenoiserConfig::desk(), 0).unwrap();
        let n = model.param_count();
        assert!(n > 10_000, "suspiciously small model: {n} params");
        assert_eq!(n, Denoiser::new(DenoiserConfig::desk(), 5).unwrap().param_count());
    }

    #[test]
    fn forward_goes_through_both_paths_after_training_moves_proj() {
        let mut rng = rng_from_seed(23);
        let mut model = Denoiser::new(toy_config(), 23).unwrap();
        // Move the TPE projection off zero: TAB weights now matter.
        model.visit_params("", &mut |name, p| {
            if name.contains("tpe.proj") {
                p.w.iter_mut().for_each(|w| *w = rng.gen_range(-0.1..0.1));
            }
        });
        let (x, v, mu) = test_inputs(16, 2, 5);
        let before = model.predict_noise(&x, &v, &mu, 4).unwrap();
        model.visit_params("", &mut |name, p| {
            if name.contains(".tab") && name.ends_with(".w") {
                p.w.iter_mut().for_each(|w| *w += 0.2);
            }
        });
        let after = model.predict_noise(&x, &v, &mu, 4).unwrap();
        assert_ne!(before.as_slice(), after.as_slice());
    }
}
