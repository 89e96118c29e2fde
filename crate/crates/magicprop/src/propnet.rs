//! The conditional denoiser: a small UNet over 4-channel latents that
//! predicts the v-value of the noisy target latent.
//!
//! Spatial conditions (target depth, previous latent, previous depth) are
//! channel-concatenated with the noisy latent at a single assembly point,
//! in the fixed order [z_t | m_k | z_{k-1} | m_{k-1}] versioned in the
//! checkpoint header. Reference information enters exclusively through
//! cross-attention over the adaptor's token sequence at the bottleneck;
//! tokens carry no positional encoding, so attention is permutation
//! invariant over them.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dLayer, LinearLayer, NormLayer, ParamStore, Tape, Tensor};

/// Version tag for the condition channel order, stored in checkpoints.
pub const CHANNEL_ORDER: &str = "zt|mk|zk1|mk1:v1";

/// Spatially aligned conditions for one denoising call, all at latent
/// resolution: target depth [b,1,h,w], previous latent [b,4,h,w], previous
/// depth [b,1,h,w].
pub struct SpatialCond {
    pub target_depth: Tensor,
    pub prev_latent: Tensor,
    pub prev_depth: Tensor,
}

impl SpatialCond {
    fn validate(&self, z_t: &Tensor) -> Result<()> {
        let (b, h, w) = match *z_t.shape() {
            [b, 4, h, w] => (b, h, w),
            _ => {
                return Err(Error::contract(format!(
                    "noisy latent must be [b, 4, h, w], got {:?}",
                    z_t.shape()
                )))
            }
        };
        for (name, t, c) in [
            ("target_depth", &self.target_depth, 1usize),
            ("prev_latent", &self.prev_latent, 4),
            ("prev_depth", &self.prev_depth, 1),
        ] {
            if t.shape() != [b, c, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "denoise",
                    lhs: vec![b, c, h, w],
                    rhs: t.shape().to_vec(),
                });
            }
            if name.contains("depth") && t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal timestep features, standard formulation, dim must be even.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            data.push(((ti as f64) * freq).sin() as f32);
        }
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            data.push(((ti as f64) * freq).cos() as f32);
        }
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

#[derive(Clone, Copy, Debug)]
pub struct PropNetDims {
    /// Channels at the input (latent) resolution.
    pub base: usize,
    /// Channels at the bottleneck (half) resolution.
    pub mid: usize,
    /// Width of the reference token sequence.
    pub token_dim: usize,
    /// Attention projection width at the bottleneck.
    pub attn_dim: usize,
    /// Timestep feature width.
    pub time_dim: usize,
}

impl Default for PropNetDims {
    fn default() -> Self {
        PropNetDims {
            base: 64,
            mid: 128,
            token_dim: 64,
            attn_dim: 64,
            time_dim: 64,
        }
    }
}

struct ResBlock {
    norm: NormLayer,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    temb: LinearLayer,
}

impl ResBlock {
    fn build(ps: &mut ParamStore, seed: u64, name: &str, c: usize, time_hidden: usize, trainable: bool) -> ResBlock {
        ResBlock {
            norm: NormLayer::build(ps, &format!("{name}.norm"), c, trainable),
            conv1: Conv2dLayer::build(ps, seed, &format!("{name}.conv1"), c, c, 3, 1, 1, trainable),
            conv2: Conv2dLayer::build(ps, seed, &format!("{name}.conv2"), c, c, 3, 1, 1, trainable),
            temb: LinearLayer::build(ps, seed, &format!("{name}.temb"), time_hidden, c, trainable),
        }
    }

    fn forward(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        x: &Tensor,
        temb: &Tensor,
    ) -> Result<Tensor> {
        let h = self.norm.forward_channels(ps, tape, x)?;
        let h = self.conv1.forward(ps, tape, &h)?;
        let bias = self.temb.forward(ps, tape, temb)?;
        let h = tape.add_channel_bias(&h, &bias)?;
        let h = tape.silu(&h)?;
        let h = self.conv2.forward(ps, tape, &h)?;
        tape.add(x, &h)
    }
}

struct CrossAttention {
    norm_q: NormLayer,
    norm_kv: NormLayer,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    out: LinearLayer,
    scale: f32,
}

impl CrossAttention {
    fn build(
        ps: &mut ParamStore,
        seed: u64,
        name: &str,
        c: usize,
        token_dim: usize,
        attn_dim: usize,
        trainable: bool,
    ) -> CrossAttention {
        CrossAttention {
            norm_q: NormLayer::build(ps, &format!("{name}.norm_q"), c, trainable),
            norm_kv: NormLayer::build(ps, &format!("{name}.norm_kv"), token_dim, trainable),
            q: LinearLayer::build(ps, seed, &format!("{name}.q"), c, attn_dim, trainable),
            k: LinearLayer::build(ps, seed, &format!("{name}.k"), token_dim, attn_dim, trainable),
            v: LinearLayer::build(ps, seed, &format!("{name}.v"), token_dim, attn_dim, trainable),
            out: LinearLayer::build(ps, seed, &format!("{name}.out"), attn_dim, c, trainable),
            scale: 1.0 / (attn_dim as f32).sqrt(),
        }
    }

    /// x [b, c, h, w] attends over tokens [b, n, token_dim].
    fn forward(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        x: &Tensor,
        tokens: &Tensor,
    ) -> Result<Tensor> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!("attention input is rank-4"),
        };
        let seq = tape.transpose(x, &[0, 2, 3, 1])?;
        let seq = tape.reshape(&seq, &[b, h * w, c])?;
        let qn = self.norm_q.forward(ps, tape, &seq)?;
        let q = self.q.forward(ps, tape, &qn)?;
        let kv = self.norm_kv.forward(ps, tape, tokens)?;
        let k = self.k.forward(ps, tape, &kv)?;
        let v = self.v.forward(ps, tape, &kv)?;
        let kt = tape.transpose(&k, &[0, 2, 1])?;
        let scores = tape.matmul(&q, &kt)?;
        let scores = tape.scale(&scores, self.scale)?;
        let attn = tape.softmax(&scores)?;
        let ctx = tape.matmul(&attn, &v)?;
        let proj = self.out.forward(ps, tape, &ctx)?;
        let proj = tape.reshape(&proj, &[b, h, w, c])?;
        let proj = tape.transpose(&proj, &[0, 3, 1, 2])?;
        tape.add(x, &proj)
    }
}

/// Depth-conditioned v-prediction UNet with one downsampling stage and
/// cross-attention at the bottleneck.
pub struct PropNet {
    pub dims: PropNetDims,
    time1: LinearLayer,
    time2: LinearLayer,
    conv_in: Conv2dLayer,
    down_block: ResBlock,
    down: Conv2dLayer,
    mid_block1: ResBlock,
    attn: CrossAttention,
    mid_block2: ResBlock,
    up: Conv2dLayer,
    skip: Conv2dLayer,
    up_block: ResBlock,
    norm_out: NormLayer,
    conv_out: Conv2dLayer,
}

impl PropNet {
    pub fn build(ps: &mut ParamStore, dims: PropNetDims, seed: u64, trainable: bool) -> PropNet {
        let th = dims.time_dim * 2;
        PropNet {
            dims,
            time1: LinearLayer::build(ps, seed, "denoiser.time1", dims.time_dim, th, trainable),
            time2: LinearLayer::build(ps, seed, "denoiser.time2", th, th, trainable),
            conv_in: Conv2dLayer::build(ps, seed, "denoiser.conv_in", 10, dims.base, 3, 1, 1, trainable),
            down_block: ResBlock::build(ps, seed, "denoiser.down_block", dims.base, th, trainable),
            down: Conv2dLayer::build(ps, seed, "denoiser.down", dims.base, dims.mid, 3, 2, 1, trainable),
            mid_block1: ResBlock::build(ps, seed, "denoiser.mid1", dims.mid, th, trainable),
            attn: CrossAttention::build(
                ps,
                seed,
                "denoiser.attn",
                dims.mid,
                dims.token_dim,
                dims.attn_dim,
                trainable,
            ),
            mid_block2: ResBlock::build(ps, seed, "denoiser.mid2", dims.mid, th, trainable),
            up: Conv2dLayer::build(ps, seed, "denoiser.up", dims.mid, dims.base, 3, 1, 1, trainable),
            skip: Conv2dLayer::build(ps, seed, "denoiser.skip", dims.base * 2, dims.base, 3, 1, 1, trainable),
            up_block: ResBlock::build(ps, seed, "denoiser.up_block", dims.base, th, trainable),
            norm_out: NormLayer::build(ps, "denoiser.norm_out", dims.base, trainable),
            conv_out: Conv2dLayer::build(ps, seed, "denoiser.conv_out", dims.base, 4, 3, 1, 1, trainable),
        }
    }

    /// Predict v for the noisy latent under spatial and token conditioning.
    /// `t` carries one step index per batch row.
    pub fn denoise(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        z_t: &Tensor,
        t: &[usize],
        spatial: &SpatialCond,
        tokens: &Tensor,
    ) -> Result<Tensor> {
        spatial.validate(z_t)?;
        let b = z_t.shape()[0];
        if t.len() != b {
            return Err(Error::contract(format!(
                "denoise: {} timesteps for batch of {b}",
                t.len()
            )));
        }
        match *tokens.shape() {
            [tb, _, td] if tb == b && td == self.dims.token_dim => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "denoise",
                    lhs: vec![b, 0, self.dims.token_dim],
                    rhs: tokens.shape().to_vec(),
                })
            }
        }

        // Single assembly point for the documented channel order.
        let x = tape.concat(
            &[z_t, &spatial.target_depth, &spatial.prev_latent, &spatial.prev_depth],
            1,
        )?;

        let temb = timestep_embedding(t, self.dims.time_dim);
        let temb = self.time1.forward(ps, tape, &temb)?;
        let temb = tape.silu(&temb)?;
        let temb = self.time2.forward(ps, tape, &temb)?;
        let temb = tape.silu(&temb)?;

        let (h, w) = (z_t.shape()[2], z_t.shape()[3]);
        let h0 = self.conv_in.forward(ps, tape, &x)?;
        let h1 = self.down_block.forward(ps, tape, &h0, &temb)?;
        let hd = self.down.forward(ps, tape, &h1)?;
        let hm = self.mid_block1.forward(ps, tape, &hd, &temb)?;
        let hm = self.attn.forward(ps, tape, &hm, tokens)?;
        let hm = self.mid_block2.forward(ps, tape, &hm, &temb)?;
        let hu = tape.resize_nearest(&hm, h, w)?;
        let hu = self.up.forward(ps, tape, &hu)?;
        let cat = tape.concat(&[&hu, &h1], 1)?;
        let hu = self.skip.forward(ps, tape, &cat)?;
        let hu = self.up_block.forward(ps, tape, &hu, &temb)?;
        let out = self.norm_out.forward_channels(ps, tape, &hu)?;
        let out = tape.silu(&out)?;
        self.conv_out.forward(ps, tape, &out)
    }
}

/// Area-average a pixel-space depth map [1, H, W] down 8x to latent size.
pub fn depth_to_latent_size(depth: &Tensor) -> Result<Tensor> {
    let (h, w) = match *depth.shape() {
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::contract(format!(
                "depth must be [1, h, w], got {:?}",
                depth.shape()
            )))
        }
    };
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::contract(format!(
            "depth dims must be divisible by 8, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 8, w / 8);
    let d = depth.data();
    let mut out = vec![0.0f32; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0f64;
            for dy in 0..8 {
                for dx in 0..8 {
                    acc += d[(oy * 8 + dy) * w + ox * 8 + dx] as f64;
                }
            }
            out[oy * ow + ox] = (acc / 64.0) as f32;
        }
    }
    Tensor::new(&[1, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn build_net(seed: u64) -> (ParamStore, PropNet) {
        let mut ps = ParamStore::new();
        let net = PropNet::build(&mut ps, PropNetDims::default(), seed, false);
        (ps, net)
    }

    fn random_inputs(
        b: usize,
        seed: u64,
    ) -> (Tensor, Vec<usize>, SpatialCond, Tensor) {
        let mut rng = StreamRng::new(seed, 0);
        let z_t = Tensor::randn(&[b, 4, 8, 8], &mut rng);
        let t: Vec<usize> = (0..b).map(|i| 10 + 30 * i).collect();
        let spatial = SpatialCond {
            target_depth: Tensor::from_parts(
                vec![b, 1, 8, 8],
                rng.fill_uniform(b * 64, 0.0, 1.0),
            ),
            prev_latent: Tensor::randn(&[b, 4, 8, 8], &mut rng),
            prev_depth: Tensor::from_parts(vec![b, 1, 8, 8], rng.fill_uniform(b * 64, 0.0, 1.0)),
        };
        let tokens = Tensor::randn(&[b, 17, 64], &mut rng);
        (z_t, t, spatial, tokens)
    }

    #[test]
    fn output_matches_latent_shape() {
        let (ps, net) = build_net(1);
        let (z_t, t, spatial, tokens) = random_inputs(2, 5);
        let mut tape = Tape::new(false);
        let v = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens).unwrap();
        assert_eq!(v.shape(), z_t.shape());
    }

    #[test]
    fn parameter_budget_under_five_million() {
        let mut ps = ParamStore::new();
        let _net = PropNet::build(&mut ps, PropNetDims::default(), 1, false);
        let n = ps.total_elements();
        assert!(n < 5_000_000, "denoiser has {n} parameters");
    }

    #[test]
    fn attention_is_permutation_invariant_over_tokens() {
        let (ps, net) = build_net(2);
        let (z_t, t, spatial, tokens) = random_inputs(1, 6);
        let mut tape = Tape::new(false);
        let base = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens).unwrap();

        // Reverse the token order (tokens have no positional encoding).
        let n = tokens.shape()[1];
        let d = tokens.shape()[2];
        let mut permuted = vec![0.0f32; tokens.numel()];
        for i in 0..n {
            permuted[(n - 1 - i) * d..(n - i) * d]
                .copy_from_slice(&tokens.data()[i * d..(i + 1) * d]);
        }
        let tokens_p = Tensor::from_parts(vec![1, n, d], permuted);
        let out_p = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens_p).unwrap();
        let d_max = base.max_abs_diff(&out_p).unwrap();
        assert!(d_max < 1e-5, "permutation changed output by {d_max}");
    }

    #[test]
    fn conditioning_paths_are_alive() {
        let (ps, net) = build_net(3);
        let (z_t, t, spatial, tokens) = random_inputs(1, 7);
        let mut tape = Tape::new(false);
        let base = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens).unwrap();
        let mut rng = StreamRng::new(77, 0);

        let bump = |t: &Tensor, rng: &mut StreamRng, depth: bool| {
            let data: Vec<f32> = t
                .data()
                .iter()
                .map(|&v| {
                    let n = v + rng.uniform(-0.3, 0.3);
                    if depth {
                        n.clamp(0.0, 1.0)
                    } else {
                        n
                    }
                })
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        };

        let s2 = SpatialCond {
            target_depth: bump(&spatial.target_depth, &mut rng, true),
            prev_latent: spatial.prev_latent.clone(),
            prev_depth: spatial.prev_depth.clone(),
        };
        let o2 = net.denoise(&ps, &mut tape, &z_t, &t, &s2, &tokens).unwrap();
        assert!(o2.mse(&base).unwrap() > 0.0, "target depth path is dead");

        let s3 = SpatialCond {
            target_depth: spatial.target_depth.clone(),
            prev_latent: bump(&spatial.prev_latent, &mut rng, false),
            prev_depth: spatial.prev_depth.clone(),
        };
        let o3 = net.denoise(&ps, &mut tape, &z_t, &t, &s3, &tokens).unwrap();
        assert!(o3.mse(&base).unwrap() > 0.0, "previous latent path is dead");

        let tokens2 = bump(&tokens, &mut rng, false);
        let o4 = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens2).unwrap();
        assert!(o4.mse(&base).unwrap() > 0.0, "token path is dead");

        let s5 = SpatialCond {
            target_depth: spatial.target_depth.clone(),
            prev_latent: spatial.prev_latent.clone(),
            prev_depth: bump(&spatial.prev_depth, &mut rng, true),
        };
        let o5 = net.denoise(&ps, &mut tape, &z_t, &t, &s5, &tokens).unwrap();
        assert!(o5.mse(&base).unwrap() > 0.0, "previous depth path is dead");
    }

    #[test]
    fn gradient_flows_to_all_condition_groups() {
        let mut ps = ParamStore::new();
        let net = PropNet::build(&mut ps, PropNetDims::default(), 4, false);
        let mut rng = StreamRng::new(8, 0);
        let mut tape = Tape::new(true);
        let z_t = tape.leaf(&Tensor::randn(&[1, 4, 8, 8], &mut rng), true);
        let td = tape.leaf(
            &Tensor::from_parts(vec![1, 1, 8, 8], rng.fill_uniform(64, 0.0, 1.0)),
            true,
        );
        let pl = tape.leaf(&Tensor::randn(&[1, 4, 8, 8], &mut rng), true);
        let pd = tape.leaf(
            &Tensor::from_parts(vec![1, 1, 8, 8], rng.fill_uniform(64, 0.0, 1.0)),
            true,
        );
        let tokens = tape.leaf(&Tensor::randn(&[1, 17, 64], &mut rng), true);
        let spatial = SpatialCond {
            target_depth: td.clone(),
            prev_latent: pl.clone(),
            prev_depth: pd.clone(),
        };
        let t = vec![50usize];
        let v = net.denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens).unwrap();
        let sq = tape.mul(&v, &v).unwrap();
        let loss = tape.mean_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let norm = |g: &[f32]| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        for (name, leaf) in [("z_t", &z_t), ("target_depth", &td), ("prev_latent", &pl), ("prev_depth", &pd), ("tokens", &tokens)] {
            let g = grads.of(leaf).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(norm(g) > 0.0, "{name} gradient is zero");
        }
    }

    #[test]
    fn depth_pooling_examples() {
        // Constant map stays constant.
        let c = Tensor::full(&[1, 64, 64], 0.37);
        let down = depth_to_latent_size(&c).unwrap();
        assert_eq!(down.shape(), &[1, 8, 8]);
        assert!(down.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));

        // Checkerboard with 8-pixel period (4x4 tiles) averages to 0.5.
        let mut data = vec![0.0f32; 64 * 64];
        for y in 0..64 {
            for x in 0..64 {
                data[y * 64 + x] = (((y / 4) + (x / 4)) % 2) as f32;
            }
        }
        let cb = Tensor::new(&[1, 64, 64], data).unwrap();
        let down = depth_to_latent_size(&cb).unwrap();
        assert!(down.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        // Indivisible dims are rejected.
        assert!(depth_to_latent_size(&Tensor::zeros(&[1, 60, 64])).is_err());
    }

    #[test]
    fn misaligned_conditions_are_rejected() {
        let (ps, net) = build_net(5);
        let (z_t, t, mut spatial, tokens) = random_inputs(1, 9);
        spatial.prev_latent = Tensor::zeros(&[1, 4, 4, 4]);
        let mut tape = Tape::new(false);
        assert!(net
            .denoise(&ps, &mut tape, &z_t, &t, &spatial, &tokens)
            .is_err());
    }
}
