//! Frame autoencoder: 3xHxW pixels in [-1, 1] to a 4-channel latent at 1/8
//! spatial resolution and back.
//!
//! Deterministic in both directions (no sampling); trained with plain L2
//! reconstruction. After training the latent is rescaled to roughly unit
//! standard deviation so the diffusion process sees a well-conditioned
//! space; the scale travels with the weights.

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, StreamRng};
use crate::tensor::{
    adam_step, AdamHyper, AdamState, Conv2dLayer, ParamStore, Tape, Tensor,
};

/// One RGB frame, channel-major, values in [-1, 1].
#[derive(Clone)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(t: Tensor) -> Result<Frame> {
        match *t.shape() {
            [3, _, _] => {}
            _ => {
                return Err(Error::contract(format!(
                    "frame must be [3, h, w], got {:?}",
                    t.shape()
                )))
            }
        }
        if t.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::contract("frame values must lie in [-1, 1]"));
        }
        Ok(Frame(t))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Frame> {
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = f(y, x);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = px[c];
                }
            }
        }
        Frame::new(Tensor::new(&[3, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        [d[y * w + x], d[h * w + y * w + x], d[2 * h * w + y * w + x]]
    }
}

/// A 4-channel encoding of one frame at 1/8 spatial resolution.
#[derive(Clone)]
pub struct LatentFrame(Tensor);

impl LatentFrame {
    pub fn new(t: Tensor) -> Result<LatentFrame> {
        match *t.shape() {
            [4, _, _] => Ok(LatentFrame(t)),
            _ => Err(Error::contract(format!(
                "latent must be [4, h, w], got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CodecDims {
    pub widths: [usize; 3],
}

impl Default for CodecDims {
    fn default() -> Self {
        CodecDims {
            widths: [32, 64, 128],
        }
    }
}

/// Encoder: three stride-2 convs plus a linear projection to 4 channels.
/// Decoder: convs at the coarse scales with nearest-neighbour upsampling
/// between them.
pub struct Codec {
    pub dims: CodecDims,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    enc3: Conv2dLayer,
    enc_out: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec1: Conv2dLayer,
    dec2: Conv2dLayer,
    dec3: Conv2dLayer,
    dec4: Conv2dLayer,
    dec_out: Conv2dLayer,
    pub latent_scale: f32,
}

impl Codec {
    pub fn build(ps: &mut ParamStore, dims: CodecDims, seed: u64, trainable: bool) -> Codec {
        let [w0, w1, w2] = dims.widths;
        let half = (w0 / 2).max(8);
        let c = |ps: &mut ParamStore, name: &str, ci, co, stride| {
            Conv2dLayer::build(ps, seed, name, ci, co, 3, stride, 1, trainable)
        };
        Codec {
            dims,
            enc1: c(ps, "codec.enc1", 3, w0, 2),
            enc2: c(ps, "codec.enc2", w0, w1, 2),
            enc3: c(ps, "codec.enc3", w1, w2, 2),
            enc_out: c(ps, "codec.enc_out", w2, 4, 1),
            dec_in: c(ps, "codec.dec_in", 4, w2, 1),
            dec1: c(ps, "codec.dec1", w2, w1, 1),
            dec2: c(ps, "codec.dec2", w1, w0, 1),
            dec3: c(ps, "codec.dec3", w0, half, 1),
            dec4: c(ps, "codec.dec4", half, half, 1),
            dec_out: c(ps, "codec.dec_out", half, 3, 1),
            latent_scale: 1.0,
        }
    }

    /// [b, 3, h, w] -> [b, 4, h/8, w/8]; h and w must be multiples of 8.
    pub fn encode_batch(&self, ps: &ParamStore, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        match *x.shape() {
            [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
            _ => {
                return Err(Error::contract(format!(
                    "encode expects [b, 3, 8k, 8k], got {:?}",
                    x.shape()
                )))
            }
        }
        let h = self.enc1.forward(ps, tape, x)?;
        let h = tape.silu(&h)?;
        let h = self.enc2.forward(ps, tape, &h)?;
        let h = tape.silu(&h)?;
        let h = self.enc3.forward(ps, tape, &h)?;
        let h = tape.silu(&h)?;
        let z = self.enc_out.forward(ps, tape, &h)?;
        tape.scale(&z, self.latent_scale)
    }

    /// [b, 4, h, w] -> [b, 3, 8h, 8w]. `raw` skips the output clamp for
    /// training losses.
    pub fn decode_batch(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        z: &Tensor,
        raw: bool,
    ) -> Result<Tensor> {
        let (h, w) = match *z.shape() {
            [_, 4, h, w] => (h, w),
            _ => {
                return Err(Error::contract(format!(
                    "decode expects [b, 4, h, w], got {:?}",
                    z.shape()
                )))
            }
        };
        let z = tape.scale(z, 1.0 / self.latent_scale)?;
        let y = self.dec_in.forward(ps, tape, &z)?;
        let y = tape.silu(&y)?;
        let y = self.dec1.forward(ps, tape, &y)?;
        let y = tape.silu(&y)?;
        let y = tape.resize_nearest(&y, 2 * h, 2 * w)?;
        let y = self.dec2.forward(ps, tape, &y)?;
        let y = tape.silu(&y)?;
        let y = tape.resize_nearest(&y, 4 * h, 4 * w)?;
        let y = self.dec3.forward(ps, tape, &y)?;
        let y = tape.silu(&y)?;
        let y = tape.resize_bilinear(&y, 8 * h, 8 * w)?;
        let y = self.dec4.forward(ps, tape, &y)?;
        let y = tape.silu(&y)?;
        let y = self.dec_out.forward(ps, tape, &y)?;
        if raw {
            Ok(y)
        } else {
            Ok(y.clamped(-1.0, 1.0))
        }
    }

    /// Deterministic single-frame encode.
    pub fn encode(&self, ps: &ParamStore, frame: &Frame) -> Result<LatentFrame> {
        let mut tape = Tape::new(false);
        let x = Tensor::stack(&[frame.tensor()])?;
        let z = self.encode_batch(ps, &mut tape, &x)?;
        LatentFrame::new(z.select0(0)?)
    }

    /// Deterministic single-latent decode, clamped to [-1, 1].
    pub fn decode(&self, ps: &ParamStore, latent: &LatentFrame) -> Result<Frame> {
        let mut tape = Tape::new(false);
        let z = Tensor::stack(&[latent.tensor()])?;
        let y = self.decode_batch(ps, &mut tape, &z, false)?;
        Frame::new(y.select0(0)?)
    }
}

/// PSNR in dB with pixels mapped to [0, 1].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let mse = a.tensor().mse(b.tensor())? / 4.0;
    Ok(10.0 * (1.0 / mse.max(1e-12)).log10())
}

#[derive(Clone, Copy, Debug)]
pub struct CodecTrainOptions {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for CodecTrainOptions {
    fn default() -> Self {
        CodecTrainOptions {
            epochs: 4,
            steps_per_epoch: 150,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CodecTrainHistory {
    /// Mean reconstruction loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train the autoencoder on a flat list of frames. Returns the store, the
/// model (with calibrated latent scale), and the loss history.
pub fn train_codec(
    frames: &[Frame],
    dims: CodecDims,
    opts: &CodecTrainOptions,
) -> Result<(ParamStore, Codec, CodecTrainHistory)> {
    if frames.is_empty() {
        return Err(Error::contract("train_codec: empty dataset"));
    }
    let mut ps = ParamStore::new();
    let mut codec = Codec::build(&mut ps, dims, opts.seed, true);
    let mut state = AdamState::new(&ps);
    let mut history = CodecTrainHistory::default();
    let total_steps = opts.epochs * opts.steps_per_epoch;

    for epoch in 0..opts.epochs {
        let mut epoch_loss = 0.0f64;
        for step in 0..opts.steps_per_epoch {
            let global = epoch * opts.steps_per_epoch + step;
            // Staged learning-rate decay over the final stretch.
            let frac = global as f64 / total_steps.max(1) as f64;
            let lr = if frac >= 0.85 {
                opts.lr * 0.1
            } else if frac >= 0.6 {
                opts.lr * 0.3
            } else {
                opts.lr
            };
            let hp = AdamHyper {
                lr,
                ..Default::default()
            };
            let mut rng = StreamRng::new(opts.seed, indexed_stream("codec-batch", global as u64));
            let batch: Vec<&Tensor> = (0..opts.batch_size)
                .map(|_| frames[rng.uniform_usize(frames.len())].tensor())
                .collect();
            let x = Tensor::stack(&batch)?;
            let mut tape = Tape::new(true);
            let z = codec.encode_batch(&ps, &mut tape, &x)?;
            let y = codec.decode_batch(&ps, &mut tape, &z, true)?;
            let loss = tape.mse_loss(&y, &x)?;
            epoch_loss += loss.item()? as f64;
            let grads = tape.backward(&loss)?;
            adam_step(&mut ps, &grads, &mut state, &hp)?;
        }
        history.epoch_loss.push(epoch_loss / opts.steps_per_epoch as f64);
    }

    codec.latent_scale = calibrate_latent_scale(&ps, &codec, frames, opts.seed)?;
    Ok((ps, codec, history))
}

/// 1 / std of raw latents over a sample of frames.
pub fn calibrate_latent_scale(
    ps: &ParamStore,
    codec: &Codec,
    frames: &[Frame],
    seed: u64,
) -> Result<f32> {
    let mut rng = StreamRng::new(seed, indexed_stream("codec-scale", 0));
    let n = frames.len().min(64);
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut count = 0usize;
    let mut tape = Tape::new(false);
    for _ in 0..n {
        let f = &frames[rng.uniform_usize(frames.len())];
        let x = Tensor::stack(&[f.tensor()])?;
        // Raw latent, without the calibration scale itself.
        let h = codec.enc1.forward(ps, &mut tape, &x)?;
        let h = tape.silu(&h)?;
        let h = codec.enc2.forward(ps, &mut tape, &h)?;
        let h = tape.silu(&h)?;
        let h = codec.enc3.forward(ps, &mut tape, &h)?;
        let h = tape.silu(&h)?;
        let z = codec.enc_out.forward(ps, &mut tape, &h)?;
        for &v in z.data() {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(1e-8);
    Ok((1.0 / var.sqrt()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = StreamRng::new(seed, 0);
        let data: Vec<f32> = rng.fill_uniform(3 * h * w, -0.9, 0.9);
        Frame::new(Tensor::new(&[3, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn latent_shapes_track_input_size() {
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims { widths: [8, 12, 16] }, 1, false);
        for (hw, expect) in [(64usize, 8usize), (256, 32)] {
            let f = tiny_frame(hw, hw, 7);
            let z = codec.encode(&ps, &f).unwrap();
            assert_eq!(z.tensor().shape(), &[4, expect, expect]);
            let back = codec.decode(&ps, &z).unwrap();
            assert_eq!(back.tensor().shape(), &[3, hw, hw]);
        }
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims::default(), 2, false);
        let f = tiny_frame(64, 64, 3);
        let a = codec.encode(&ps, &f).unwrap();
        let b = codec.encode(&ps, &f).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        let da = codec.decode(&ps, &a).unwrap();
        let db = codec.decode(&ps, &b).unwrap();
        assert_eq!(da.tensor().data(), db.tensor().data());
    }

    #[test]
    fn decode_output_stays_in_range() {
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims::default(), 4, false);
        let mut rng = StreamRng::new(9, 0);
        let z = LatentFrame::new(Tensor::randn(&[4, 8, 8], &mut rng).scaled(5.0).unwrap()).unwrap();
        let f = codec.decode(&ps, &z).unwrap();
        assert!(f.tensor().data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Zero latent decodes to some fixed frame.
        let z0 = LatentFrame::new(Tensor::zeros(&[4, 8, 8])).unwrap();
        let f0a = codec.decode(&ps, &z0).unwrap();
        let f0b = codec.decode(&ps, &z0).unwrap();
        assert_eq!(f0a.tensor().data(), f0b.tensor().data());
    }

    #[test]
    fn wrong_shapes_error() {
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims::default(), 5, false);
        let mut tape = Tape::new(false);
        assert!(codec
            .encode_batch(&ps, &mut tape, &Tensor::zeros(&[1, 4, 64, 64]))
            .is_err());
        assert!(codec
            .encode_batch(&ps, &mut tape, &Tensor::zeros(&[1, 3, 60, 60]))
            .is_err());
        assert!(codec
            .decode_batch(&ps, &mut tape, &Tensor::zeros(&[1, 3, 8, 8]), false)
            .is_err());
        assert!(Frame::new(Tensor::new(&[3, 2, 2], vec![1.5; 12]).unwrap()).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_codec(&[], CodecDims::default(), &CodecTrainOptions::default()).is_err());
    }

    #[test]
    fn latent_perturbation_is_bounded() {
        // L-infinity perturbation of 0.01 on the frame produces a bounded,
        // finite latent change.
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims::default(), 6, false);
        let f = tiny_frame(64, 64, 11);
        let mut bumped = f.tensor().data().to_vec();
        for v in bumped.iter_mut() {
            *v = (*v + 0.01).min(1.0);
        }
        let f2 = Frame::new(Tensor::new(&[3, 64, 64], bumped).unwrap()).unwrap();
        let z1 = codec.encode(&ps, &f).unwrap();
        let z2 = codec.encode(&ps, &f2).unwrap();
        let d = z1.tensor().max_abs_diff(z2.tensor()).unwrap();
        assert!(d.is_finite() && d < 10.0, "latent moved by {d}");
    }
}
