//! Reference-frame conditioning: a small trained-from-scratch encoder
//! producing a class token plus a patch-token grid, and the fusion adaptor
//! that merges those tokens with the reference latent into the sequence
//! consumed by cross-attention.
//!
//! The fusion stages: patch tokens are resized bilinearly to half the
//! latent resolution and channel-reduced l -> l/2 by two pointwise convs
//! with SiLU; the latent is lifted 4 -> l/2 by a 3x3 conv, spatially halved
//! by 2x2 max-pooling and mixed by a pointwise conv; the two halves are
//! channel-concatenated and blended by two 3x3 convs, flattened, and
//! prepended with the untouched class token.

use crate::codec::{Frame, LatentFrame};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, StreamRng};
use crate::synthdata::{
    color_family_of, BackgroundStyle, StyleId, VideoClip, BACKGROUND_STYLE_COUNT, COLOR_FAMILIES,
};
use crate::tensor::{
    adam_step, AdamHyper, AdamState, Conv2dLayer, LinearLayer, ParamStore, Tape, Tensor,
};

/// Class-level plus patch-level features of one reference frame.
pub struct ReferenceEmbedding {
    /// [l]
    pub class_token: Tensor,
    /// [l, h', w']
    pub patch_tokens: Tensor,
}

/// Fused token sequence for cross-attention: class token first, then
/// (h/2)*(w/2) spatial tokens, each of width l.
pub struct ReferenceTokens(Tensor);

impl ReferenceTokens {
    pub fn new(t: Tensor) -> Result<ReferenceTokens> {
        match *t.shape() {
            [n, _] if n >= 2 => Ok(ReferenceTokens(t)),
            _ => Err(Error::contract(format!(
                "reference tokens must be [n, l] with n >= 2, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// The untouched class token (row 0).
    pub fn class_token(&self) -> &[f32] {
        &self.0.data()[..self.width()]
    }
}

// ── reference encoder ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct RefEncoderDims {
    pub embed: usize,
    pub widths: [usize; 3],
}

impl Default for RefEncoderDims {
    fn default() -> Self {
        RefEncoderDims {
            embed: 64,
            widths: [16, 32, 64],
        }
    }
}

/// Stand-in for a pretrained image encoder: three stride-2 conv stages, a
/// pooled class token, pointwise patch projection, and classification
/// heads over synthetic scene attributes used only during its training.
pub struct RefEncoder {
    pub dims: RefEncoderDims,
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    patch_proj: Conv2dLayer,
    class_proj: LinearLayer,
    head_shape: LinearLayer,
    head_color: LinearLayer,
    head_bg: LinearLayer,
    pub trained: bool,
}

impl RefEncoder {
    pub fn build(ps: &mut ParamStore, dims: RefEncoderDims, seed: u64, trainable: bool) -> RefEncoder {
        let [w0, w1, w2] = dims.widths;
        let l = dims.embed;
        assert!(l % 2 == 0, "embedding width must be even");
        RefEncoder {
            dims,
            c1: Conv2dLayer::build(ps, seed, "refenc.c1", 3, w0, 3, 2, 1, trainable),
            c2: Conv2dLayer::build(ps, seed, "refenc.c2", w0, w1, 3, 2, 1, trainable),
            c3: Conv2dLayer::build(ps, seed, "refenc.c3", w1, w2, 3, 2, 1, trainable),
            patch_proj: Conv2dLayer::build(ps, seed, "refenc.patch", w2, l, 1, 1, 0, trainable),
            class_proj: LinearLayer::build(ps, seed, "refenc.class", w2, l, trainable),
            head_shape: LinearLayer::build(ps, seed, "refenc.head_shape", l, 3, trainable),
            head_color: LinearLayer::build(
                ps,
                seed,
                "refenc.head_color",
                l,
                COLOR_FAMILIES.len(),
                trainable,
            ),
            head_bg: LinearLayer::build(
                ps,
                seed,
                "refenc.head_bg",
                l,
                BACKGROUND_STYLE_COUNT,
                trainable,
            ),
            trained: false,
        }
    }

    /// [b, 3, h, w] -> (class [b, l], patches [b, l, h/8, w/8]).
    pub fn embed_batch(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        frames: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let h = self.c1.forward(ps, tape, frames)?;
        let h = tape.silu(&h)?;
        let h = self.c2.forward(ps, tape, &h)?;
        let h = tape.silu(&h)?;
        let h = self.c3.forward(ps, tape, &h)?;
        let h = tape.silu(&h)?;
        let patches = self.patch_proj.forward(ps, tape, &h)?;
        let pooled = tape.mean_trailing(&h, 2)?;
        let class = self.class_proj.forward(ps, tape, &pooled)?;
        Ok((class, patches))
    }

    /// Classification logits from the class token, for the auxiliary task.
    pub fn heads(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        class: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            self.head_shape.forward(ps, tape, class)?,
            self.head_color.forward(ps, tape, class)?,
            self.head_bg.forward(ps, tape, class)?,
        ))
    }
}

/// Deterministic single-frame embedding. Requires trained weights.
pub fn embed_reference(
    frame: &Frame,
    ps: &ParamStore,
    enc: &RefEncoder,
) -> Result<ReferenceEmbedding> {
    if !enc.trained {
        return Err(Error::contract(
            "reference encoder is untrained; run train-encoder first",
        ));
    }
    let mut tape = Tape::new(false);
    let x = Tensor::stack(&[frame.tensor()])?;
    let (class, patches) = enc.embed_batch(ps, &mut tape, &x)?;
    Ok(ReferenceEmbedding {
        class_token: class.select0(0)?,
        patch_tokens: patches.select0(0)?,
    })
}

// ── fusion adaptor ──────────────────────────────────────────────────

pub struct Adaptor {
    pub embed: usize,
    patch_down1: Conv2dLayer,
    patch_down2: Conv2dLayer,
    latent_lift: Conv2dLayer,
    latent_mix: Conv2dLayer,
    mix1: Conv2dLayer,
    mix2: Conv2dLayer,
}

impl Adaptor {
    pub fn build(ps: &mut ParamStore, embed: usize, seed: u64, trainable: bool) -> Result<Adaptor> {
        if embed % 2 != 0 {
            return Err(Error::contract(format!(
                "adaptor embedding width must be even, got {embed}"
            )));
        }
        let half = embed / 2;
        Ok(Adaptor {
            embed,
            patch_down1: Conv2dLayer::build(ps, seed, "adaptor.patch1", embed, half, 1, 1, 0, trainable),
            patch_down2: Conv2dLayer::build(ps, seed, "adaptor.patch2", half, half, 1, 1, 0, trainable),
            latent_lift: Conv2dLayer::build(ps, seed, "adaptor.lift", 4, half, 3, 1, 1, trainable),
            latent_mix: Conv2dLayer::build(ps, seed, "adaptor.lmix", half, half, 1, 1, 0, trainable),
            mix1: Conv2dLayer::build(ps, seed, "adaptor.mix1", embed, embed, 3, 1, 1, trainable),
            mix2: Conv2dLayer::build(ps, seed, "adaptor.mix2", embed, embed, 3, 1, 1, trainable),
        })
    }

    /// Batched fusion: class [b, l], patches [b, l, h', w'], latent
    /// [b, 4, h, w] with h, w even -> tokens [b, 1 + (h/2)(w/2), l].
    pub fn fuse_batch(
        &self,
        ps: &ParamStore,
        tape: &mut Tape,
        class: &Tensor,
        patches: &Tensor,
        latent: &Tensor,
    ) -> Result<Tensor> {
        let l = self.embed;
        let (b, hp, wp) = match *patches.shape() {
            [b, pl, hp, wp] if pl == l => (b, hp, wp),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "fuse",
                    lhs: vec![l],
                    rhs: patches.shape().to_vec(),
                })
            }
        };
        if hp != wp {
            return Err(Error::contract(format!(
                "patch grid must be square, got {hp}x{wp}"
            )));
        }
        let (bl, h, w) = match *latent.shape() {
            [bl, 4, h, w] if h % 2 == 0 && w % 2 == 0 => (bl, h, w),
            _ => {
                return Err(Error::contract(format!(
                    "latent must be [b, 4, even, even], got {:?}",
                    latent.shape()
                )))
            }
        };
        if b != bl || class.shape() != [b, l] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: patches.shape().to_vec(),
                rhs: latent.shape().to_vec(),
            });
        }

        // Patch path: bilinear resize to (h/2, w/2), two pointwise convs.
        let p = tape.resize_bilinear(patches, h / 2, w / 2)?;
        let p = self.patch_down1.forward(ps, tape, &p)?;
        let p = tape.silu(&p)?;
        let p = self.patch_down2.forward(ps, tape, &p)?;
        let p = tape.silu(&p)?;

        // Latent path: lift channels, pool to half resolution, mix.
        let z = self.latent_lift.forward(ps, tape, latent)?;
        let z = tape.silu(&z)?;
        let z = tape.maxpool2(&z)?;
        let z = self.latent_mix.forward(ps, tape, &z)?;
        let z = tape.silu(&z)?;

        // Fuse and flatten; class token is prepended untouched.
        let f = tape.concat(&[&p, &z], 1)?;
        let f = self.mix1.forward(ps, tape, &f)?;
        let f = tape.silu(&f)?;
        let f = self.mix2.forward(ps, tape, &f)?;
        let seq = tape.reshape(&f, &[b, l, (h / 2) * (w / 2)])?;
        let seq = tape.transpose(&seq, &[0, 2, 1])?;
        let class_row = tape.reshape(class, &[b, 1, l])?;
        tape.concat(&[&class_row, &seq], 1)
    }
}

/// Single-frame fusion of an embedding with the clean reference latent.
pub fn fuse(
    embedding: &ReferenceEmbedding,
    ref_latent: &LatentFrame,
    ps: &ParamStore,
    adaptor: &Adaptor,
) -> Result<ReferenceTokens> {
    let mut tape = Tape::new(false);
    let class = Tensor::stack(&[&embedding.class_token])?;
    let patches = Tensor::stack(&[&embedding.patch_tokens])?;
    let latent = Tensor::stack(&[ref_latent.tensor()])?;
    let tokens = adaptor.fuse_batch(ps, &mut tape, &class, &patches, &latent)?;
    ReferenceTokens::new(tokens.select0(0)?)
}

// ── encoder training ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct EncoderTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for EncoderTrainOptions {
    fn default() -> Self {
        EncoderTrainOptions {
            steps: 700,
            batch_size: 32,
            lr: 1.5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncoderTrainHistory {
    pub loss: Vec<f64>,
    pub final_accuracy: f64,
}

fn bg_style_label(style: BackgroundStyle) -> usize {
    style.index()
}

/// Mean object color of a styled frame over the ground-truth mask.
fn styled_object_family(clip: &VideoClip, style: StyleId, frame_idx: usize) -> Result<usize> {
    let styled = crate::synthdata::restyle_frame(&clip.frames[frame_idx], style)?;
    let mask = &clip.masks[frame_idx];
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                let px = styled.pixel(y, x);
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
                n += 1;
            }
        }
    }
    let mean = [
        (sum[0] / n as f64) as f32,
        (sum[1] / n as f64) as f32,
        (sum[2] / n as f64) as f32,
    ];
    Ok(color_family_of(mean))
}

/// Train the reference encoder with the shape / color-family / background
/// classification task over styled variants of the corpus clips.
pub fn train_reference_encoder(
    clips: &[VideoClip],
    dims: RefEncoderDims,
    opts: &EncoderTrainOptions,
) -> Result<(ParamStore, RefEncoder, EncoderTrainHistory)> {
    if clips.is_empty() {
        return Err(Error::contract("train_reference_encoder: empty dataset"));
    }
    let mut ps = ParamStore::new();
    let mut enc = RefEncoder::build(&mut ps, dims, opts.seed, true);
    let mut state = AdamState::new(&ps);
    let hp = AdamHyper {
        lr: opts.lr,
        ..Default::default()
    };
    let mut history = EncoderTrainHistory::default();

    let draw_batch = |step: u64, batch: usize| -> Result<(Tensor, Vec<usize>, Vec<usize>, Vec<usize>)> {
        let mut rng = StreamRng::new(opts.seed, indexed_stream("encoder-batch", step));
        let mut frames = Vec::with_capacity(batch);
        let mut shapes = Vec::with_capacity(batch);
        let mut colors = Vec::with_capacity(batch);
        let mut bgs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let clip = &clips[rng.uniform_usize(clips.len())];
            let style = StyleId::ALL[rng.uniform_usize(StyleId::ALL.len())];
            let k = rng.uniform_usize(clip.len());
            let styled = crate::synthdata::restyle_frame(&clip.frames[k], style)?;
            frames.push(styled.tensor().clone());
            shapes.push(clip.spec.shape as usize);
            colors.push(styled_object_family(clip, style, k)?);
            bgs.push(bg_style_label(clip.spec.background.style));
        }
        let x = Tensor::stack(&frames.iter().collect::<Vec<_>>())?;
        Ok((x, shapes, colors, bgs))
    };

    for step in 0..opts.steps {
        let (x, shapes, colors, bgs) = draw_batch(step as u64, opts.batch_size)?;
        let mut tape = Tape::new(true);
        let (class, _patches) = enc.embed_batch(&ps, &mut tape, &x)?;
        let (ls, lc, lb) = enc.heads(&ps, &mut tape, &class)?;
        let loss_s = tape.cross_entropy_logits(&ls, &shapes)?;
        let loss_c = tape.cross_entropy_logits(&lc, &colors)?;
        let loss_b = tape.cross_entropy_logits(&lb, &bgs)?;
        let partial = tape.add(&loss_s, &loss_c)?;
        let loss = tape.add(&partial, &loss_b)?;
        history.loss.push(loss.item()? as f64);
        let grads = tape.backward(&loss)?;
        adam_step(&mut ps, &grads, &mut state, &hp)?;
    }

    // Held-back accuracy over a fresh batch.
    let (x, shapes, colors, bgs) = draw_batch(u64::MAX, 64)?;
    let mut tape = Tape::new(false);
    let (class, _p) = enc.embed_batch(&ps, &mut tape, &x)?;
    let (ls, lc, lb) = enc.heads(&ps, &mut tape, &class)?;
    let acc = |logits: &Tensor, labels: &[usize]| -> f64 {
        let c = logits.shape()[1];
        let mut ok = 0usize;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            ok += (pred == lab) as usize;
        }
        ok as f64 / labels.len() as f64
    };
    history.final_accuracy =
        (acc(&ls, &shapes) + acc(&lc, &colors) + acc(&lb, &bgs)) / 3.0;
    enc.trained = true;
    Ok((ps, enc, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_embedding(l: usize, grid: usize, seed: u64) -> ReferenceEmbedding {
        let mut rng = StreamRng::new(seed, 0);
        ReferenceEmbedding {
            class_token: Tensor::randn(&[l], &mut rng),
            patch_tokens: Tensor::randn(&[l, grid, grid], &mut rng),
        }
    }

    #[test]
    fn desk_scale_shapes() {
        let mut ps = ParamStore::new();
        let enc = RefEncoder::build(&mut ps, RefEncoderDims::default(), 1, false);
        let mut tape = Tape::new(false);
        let x = Tensor::zeros(&[2, 3, 64, 64]);
        let (class, patches) = enc.embed_batch(&ps, &mut tape, &x).unwrap();
        assert_eq!(class.shape(), &[2, 64]);
        assert_eq!(patches.shape(), &[2, 64, 8, 8]);
    }

    #[test]
    fn untrained_encoder_is_refused() {
        let mut ps = ParamStore::new();
        let enc = RefEncoder::build(&mut ps, RefEncoderDims::default(), 1, false);
        let f = Frame::new(Tensor::zeros(&[3, 64, 64])).unwrap();
        assert!(embed_reference(&f, &ps, &enc).is_err());
    }

    #[test]
    fn identical_frames_identical_embeddings() {
        let mut ps = ParamStore::new();
        let mut enc = RefEncoder::build(&mut ps, RefEncoderDims::default(), 2, false);
        enc.trained = true;
        let mut rng = StreamRng::new(4, 0);
        let f = Frame::new(
            Tensor::new(&[3, 64, 64], rng.fill_uniform(3 * 64 * 64, -0.9, 0.9)).unwrap(),
        )
        .unwrap();
        let a = embed_reference(&f, &ps, &enc).unwrap();
        let b = embed_reference(&f, &ps, &enc).unwrap();
        assert_eq!(a.class_token.data(), b.class_token.data());
        assert_eq!(a.patch_tokens.data(), b.patch_tokens.data());
    }

    #[test]
    fn fuse_desk_scale_token_count() {
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 64, 3, false).unwrap();
        let emb = random_embedding(64, 8, 5);
        let latent = LatentFrame::new(Tensor::zeros(&[4, 8, 8])).unwrap();
        let tokens = fuse(&emb, &latent, &ps, &adaptor).unwrap();
        assert_eq!(tokens.count(), 17);
        assert_eq!(tokens.width(), 64);
    }

    #[test]
    fn fuse_sd_scale_token_count() {
        // Full-width check: l=768, latent 4x32x32, patch grid 16x16
        // -> 257 tokens of width 768.
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 768, 3, false).unwrap();
        let emb = random_embedding(768, 16, 6);
        let latent = LatentFrame::new(Tensor::zeros(&[4, 32, 32])).unwrap();
        let tokens = fuse(&emb, &latent, &ps, &adaptor).unwrap();
        assert_eq!(tokens.count(), 257);
        assert_eq!(tokens.width(), 768);
    }

    #[test]
    fn class_token_passes_through_bit_exact() {
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 64, 7, false).unwrap();
        let emb = random_embedding(64, 8, 8);
        let mut rng = StreamRng::new(9, 0);
        let latent = LatentFrame::new(Tensor::randn(&[4, 8, 8], &mut rng)).unwrap();
        let tokens = fuse(&emb, &latent, &ps, &adaptor).unwrap();
        assert_eq!(tokens.class_token(), emb.class_token.data());
    }

    #[test]
    fn odd_width_and_non_square_grids_are_rejected() {
        let mut ps = ParamStore::new();
        assert!(Adaptor::build(&mut ps, 63, 1, false).is_err());
        let adaptor = Adaptor::build(&mut ps, 64, 1, false).unwrap();
        let mut tape = Tape::new(false);
        let class = Tensor::zeros(&[1, 64]);
        let bad_patches = Tensor::zeros(&[1, 64, 8, 4]);
        let latent = Tensor::zeros(&[1, 4, 8, 8]);
        assert!(adaptor
            .fuse_batch(&ps, &mut tape, &class, &bad_patches, &latent)
            .is_err());
        // Batch mismatch.
        let patches = Tensor::zeros(&[2, 64, 8, 8]);
        assert!(adaptor
            .fuse_batch(&ps, &mut tape, &class, &patches, &latent)
            .is_err());
    }

    #[test]
    fn gradients_flow_to_both_paths() {
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 64, 11, false).unwrap();
        let mut rng = StreamRng::new(12, 0);
        let mut tape = Tape::new(true);
        let class = tape.leaf(&Tensor::randn(&[2, 64], &mut rng), true);
        let patches = tape.leaf(&Tensor::randn(&[2, 64, 8, 8], &mut rng), true);
        let latent = tape.leaf(&Tensor::randn(&[2, 4, 8, 8], &mut rng), true);
        let tokens = adaptor
            .fuse_batch(&ps, &mut tape, &class, &patches, &latent)
            .unwrap();
        let sq = tape.mul(&tokens, &tokens).unwrap();
        let loss = tape.mean_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let norm = |g: &[f32]| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        assert!(norm(grads.of(&patches).unwrap()) > 0.0);
        assert!(norm(grads.of(&latent).unwrap()) > 0.0);
        assert!(norm(grads.of(&class).unwrap()) > 0.0);
    }

    #[test]
    fn shape_law_over_grid_sizes() {
        // Output token count is 1 + (h/2)(w/2) for any even square latent.
        for (l, h) in [(32usize, 4usize), (64, 8), (64, 16), (32, 32)] {
            let mut ps = ParamStore::new();
            let adaptor = Adaptor::build(&mut ps, l, 13, false).unwrap();
            let mut tape = Tape::new(false);
            let class = Tensor::zeros(&[1, l]);
            let patches = Tensor::zeros(&[1, l, 8, 8]);
            let latent = Tensor::zeros(&[1, 4, h, h]);
            let tokens = adaptor
                .fuse_batch(&ps, &mut tape, &class, &patches, &latent)
                .unwrap();
            assert_eq!(tokens.shape(), &[1, 1 + (h / 2) * (h / 2), l]);
        }
    }

    #[test]
    fn quadrant_zeroing_respects_receptive_field() {
        // With identity-like mixing kernels, zeroing a latent quadrant may
        // change only tokens whose grid cell maps into that quadrant plus a
        // one-pixel halo from the 3x3 lift conv.
        let l = 64usize;
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, l, 17, false).unwrap();
        // Identity kernels: center tap 1 on the diagonal for the two 3x3
        // mixing convs and the pointwise latent mix.
        let ident_3x3 = |c: usize| {
            let mut w = vec![0.0f32; c * c * 9];
            for i in 0..c {
                w[(i * c + i) * 9 + 4] = 1.0;
            }
            w
        };
        let ident_1x1 = |c: usize| {
            let mut w = vec![0.0f32; c * c];
            for i in 0..c {
                w[i * c + i] = 1.0;
            }
            w
        };
        let set = |ps: &mut ParamStore, name: &str, data: Vec<f32>| {
            let id = ps.by_name(name).unwrap();
            ps.set_data(id, data).unwrap();
        };
        set(&mut ps, "adaptor.mix1.w", ident_3x3(l));
        set(&mut ps, "adaptor.mix2.w", ident_3x3(l));
        set(&mut ps, "adaptor.lmix.w", ident_1x1(l / 2));

        let emb = random_embedding(l, 8, 21);
        let mut rng = StreamRng::new(22, 0);
        let base = Tensor::randn(&[4, 8, 8], &mut rng);
        let mut zeroed = base.data().to_vec();
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    zeroed[c * 64 + y * 8 + x] = 0.0;
                }
            }
        }
        let la = LatentFrame::new(base.clone()).unwrap();
        let lb = LatentFrame::new(Tensor::new(&[4, 8, 8], zeroed).unwrap()).unwrap();
        let ta = fuse(&emb, &la, &ps, &adaptor).unwrap();
        let tb = fuse(&emb, &lb, &ps, &adaptor).unwrap();

        // Zeroed quadrant: latent rows 0..4, cols 0..4 -> pooled cells
        // rows 0..2, cols 0..2; the 3x3 lift halo extends one latent pixel,
        // reaching pooled row/col 2. Grid cell (gy, gx) may change iff
        // gy <= 2 and gx <= 2.
        let mut changed_outside = 0usize;
        let mut changed_inside = 0usize;
        for gy in 0..4usize {
            for gx in 0..4usize {
                let row = 1 + gy * 4 + gx;
                let a = &ta.tensor().data()[row * l..(row + 1) * l];
                let b = &tb.tensor().data()[row * l..(row + 1) * l];
                let diff = a
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                if gy <= 2 && gx <= 2 {
                    if diff > 0.0 {
                        changed_inside += 1;
                    }
                } else if diff > 0.0 {
                    changed_outside += 1;
                }
            }
        }
        assert_eq!(changed_outside, 0, "tokens outside the halo changed");
        assert!(changed_inside >= 4, "zeroing should affect the mapped cells");
    }
}
