//! Per-frame spatial encoder: a small vision transformer that reads each
//! frame out at a learned class token, producing one row per frame.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::VideoClip;
use crate::nn::{Embedding, EncoderBlock, Fwd, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("frame of {h}x{w} pixels is not divisible by patch size {patch}")]
    Indivisible { h: usize, w: usize, patch: usize },
    #[error("clip {0} has no frames")]
    EmptyClip(String),
    #[error("frame dimensions {h}x{w}x{c} do not match the encoder ({expected_hw}x{expected_hw}x3)")]
    WrongFrameShape {
        h: usize,
        w: usize,
        c: usize,
        expected_hw: usize,
    },
}

/// Split a row-major HxWxC frame into non-overlapping patch vectors,
/// patch-grid row-major, each of length patch*patch*C.
pub fn patchify(
    frame: &[f64],
    h: usize,
    w: usize,
    c: usize,
    patch: usize,
) -> Result<Vec<Vec<f64>>, SpatialError> {
    if h % patch != 0 || w % patch != 0 {
        return Err(SpatialError::Indivisible { h, w, patch });
    }
    debug_assert_eq!(frame.len(), h * w * c);
    let rows = h / patch;
    let cols = w / patch;
    let mut out = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity(patch * patch * c);
            for dy in 0..patch {
                let y = pr * patch + dy;
                for dx in 0..patch {
                    let x = pc * patch + dx;
                    let base = (y * w + x) * c;
                    v.extend_from_slice(&frame[base..base + c]);
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Reassemble patch vectors produced by [`patchify`] into the frame.
pub fn unpatchify(patches: &[Vec<f64>], h: usize, w: usize, c: usize, patch: usize) -> Vec<f64> {
    let cols = w / patch;
    let mut frame = vec![0.0; h * w * c];
    for (pi, v) in patches.iter().enumerate() {
        let pr = pi / cols;
        let pc = pi % cols;
        let mut k = 0;
        for dy in 0..patch {
            let y = pr * patch + dy;
            for dx in 0..patch {
                let x = pc * patch + dx;
                let base = (y * w + x) * c;
                frame[base..base + c].copy_from_slice(&v[k..k + c]);
                k += c;
            }
        }
    }
    frame
}

pub struct SpatialEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_s: usize,
}

impl SpatialEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        image_size: usize,
        patch_size: usize,
        d_s: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        assert!(
            image_size % patch_size == 0,
            "image size {image_size} not divisible by patch size {patch_size}"
        );
        let n_patches = (image_size / patch_size) * (image_size / patch_size);
        let patch_dim = patch_size * patch_size * 3;
        SpatialEncoder {
            patch_proj: Linear::new(store, rng, "spatial.patch_proj", patch_dim, d_s, true),
            cls: store.add("spatial.cls", &[1, d_s], Init::Uniform(0.08), rng),
            pos: Embedding::new(store, rng, "spatial.pos", n_patches + 1, d_s),
            blocks: (0..n_layers)
                .map(|i| EncoderBlock::new(store, rng, &format!("spatial.block{i}"), d_s, n_heads))
                .collect(),
            ln_f: LayerNorm::new(store, rng, "spatial.ln_f", d_s),
            image_size,
            patch_size,
            d_s,
        }
    }

    /// Encode one frame to its class-token representation (d_s,).
    pub fn encode_frame(
        &self,
        f: &mut Fwd,
        frame: &[f64],
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Tensor, SpatialError> {
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(SpatialError::WrongFrameShape {
                h,
                w,
                c,
                expected_hw: self.image_size,
            });
        }
        let patches = patchify(frame, h, w, c, self.patch_size)?;
        let n = patches.len();
        let flat: Vec<f64> = patches.into_iter().flatten().collect();
        let patch_dim = self.patch_size * self.patch_size * c;
        let tokens = f.tape.constant(flat, &[n, patch_dim]);
        let projected = self.patch_proj.forward(f, &tokens);
        let mut x = Tensor::cat_rows(&[&f.param(self.cls), &projected]);
        x = x.add(&self.pos.lookup(f, &(0..=n).collect::<Vec<_>>()));
        for b in &self.blocks {
            x = b.forward(f, &x, None);
        }
        let x = self.ln_f.forward(f, &x);
        Ok(x.gather_rows(&[0]).reshape(&[self.d_s]))
    }

    /// Encode every frame of a clip: row j is frame j's representation.
    pub fn encode_clip(&self, f: &mut Fwd, clip: &VideoClip) -> Result<Tensor, SpatialError> {
        if clip.frames.is_empty() {
            return Err(SpatialError::EmptyClip(clip.clip_id.clone()));
        }
        let mut rows = Vec::with_capacity(clip.frame_count());
        for frame in &clip.frames {
            let r = self.encode_frame(f, frame, clip.height, clip.width, clip.channels)?;
            rows.push(r.reshape(&[1, self.d_s]));
        }
        Ok(Tensor::cat_rows(&rows.iter().collect::<Vec<_>>()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn toy_encoder() -> (SpatialEncoder, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let enc = SpatialEncoder::new(&mut store, &mut rng, 16, 8, 8, 2, 2);
        (enc, store)
    }

    fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
        (0..size * size * 3).map(|_| rng.random::<f64>()).collect()
    }

    fn clip_of(frames: Vec<Vec<f64>>, size: usize) -> VideoClip {
        VideoClip {
            clip_id: "t".into(),
            frames,
            height: size,
            width: size,
            channels: 3,
        }
    }

    #[test]
    fn patchify_counts_and_lengths() {
        let frame = vec![0.5; 32 * 32 * 3];
        let patches = patchify(&frame, 32, 32, 3, 8).unwrap();
        assert_eq!(patches.len(), 16);
        assert!(patches.iter().all(|p| p.len() == 192));
    }

    #[test]
    fn patchify_roundtrips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_frame(&mut rng, 16);
        let patches = patchify(&frame, 16, 16, 3, 8).unwrap();
        assert_eq!(unpatchify(&patches, 16, 16, 3, 8), frame);
    }

    #[test]
    fn constant_frame_gives_identical_patches() {
        let frame = vec![0.25; 16 * 16 * 3];
        let patches = patchify(&frame, 16, 16, 3, 8).unwrap();
        assert!(patches.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let frame = vec![0.0; 10 * 10 * 3];
        assert!(matches!(
            patchify(&frame, 10, 10, 3, 8),
            Err(SpatialError::Indivisible { .. })
        ));
    }

    #[test]
    fn encode_frame_returns_d_s_vector_and_is_deterministic() {
        let (enc, store) = toy_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_frame(&mut rng, 16);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let a = enc.encode_frame(&mut f, &frame, 16, 16, 3).unwrap();
        let b = enc.encode_frame(&mut f, &frame, 16, 16, 3).unwrap();
        assert_eq!(a.shape(), &[8]);
        assert_eq!(a.data(), b.data(), "identical frames must encode identically");
    }

    #[test]
    fn clip_rows_follow_frames_and_permute_together() {
        let (enc, store) = toy_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f0 = random_frame(&mut rng, 16);
        let f1 = random_frame(&mut rng, 16);
        let f2 = random_frame(&mut rng, 16);

        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let z = enc
            .encode_clip(&mut f, &clip_of(vec![f0.clone(), f1.clone(), f2.clone()], 16))
            .unwrap();
        assert_eq!(z.shape(), &[3, 8]);
        let zp = enc
            .encode_clip(&mut f, &clip_of(vec![f2, f0, f1], 16))
            .unwrap();
        let (zd, zpd) = (z.data(), zp.data());
        // row k of the permuted clip equals the corresponding original row
        for (src, dst) in [(2usize, 0usize), (0, 1), (1, 2)] {
            assert_eq!(&zd[src * 8..(src + 1) * 8], &zpd[dst * 8..(dst + 1) * 8]);
        }
    }

    #[test]
    fn encoding_is_frame_local() {
        let (enc, store) = toy_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f0 = random_frame(&mut rng, 16);
        let f1 = random_frame(&mut rng, 16);
        let f1_perturbed: Vec<f64> = f1.iter().map(|v| v * 0.9 + 0.05).collect();

        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let za = enc.encode_clip(&mut f, &clip_of(vec![f0.clone(), f1], 16)).unwrap();
        let zb = enc.encode_clip(&mut f, &clip_of(vec![f0, f1_perturbed], 16)).unwrap();
        assert_eq!(&za.data()[..8], &zb.data()[..8], "row 0 must ignore frame 1");
        assert_ne!(&za.data()[8..], &zb.data()[8..]);
    }

    #[test]
    fn empty_clip_rejected() {
        let (enc, store) = toy_encoder();
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        assert!(matches!(
            enc.encode_clip(&mut f, &clip_of(vec![], 16)),
            Err(SpatialError::EmptyClip(_))
        ));
    }

    #[test]
    fn frozen_encoder_receives_zero_gradient() {
        let (enc, store) = toy_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = random_frame(&mut rng, 16);
        let tape = Tape::new();
        let mut store = store;

        let mut f = Fwd::eval(&tape, &store);
        f.trainable = false; // frozen arm
        let z = enc.encode_frame(&mut f, &frame, 16, 16, 3).unwrap();
        let loss = z.mul(&z).sum();
        tape.backward(&loss);
        store.absorb_grads(&tape);
        assert!(
            store.iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)),
            "frozen parameters must keep zero gradient"
        );

        // end-to-end arm: at least one parameter sees gradient
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        f.trainable = true;
        let z = enc.encode_frame(&mut f, &frame, 16, 16, 3).unwrap();
        let loss = z.mul(&z).sum();
        tape.backward(&loss);
        store.absorb_grads(&tape);
        assert!(store.iter().any(|(_, p)| p.grad.iter().any(|&g| g != 0.0)));
    }
}
