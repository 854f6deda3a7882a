//! A frozen, seeded toy vision transformer and its prompt-adapted variant.
//!
//! Token layout for a forward pass with a prompt of `L_p` rows:
//!
//! ```text
//! [ prompt_0 .. prompt_{L_p-1} | cls | patch_0 .. patch_{N_p-1} ]
//! ```
//!
//! The prompt rows carry no positional embedding and their outputs are
//! dropped; `cls` produces the image-level feature and the patch rows the
//! pixel-level features. Both are row-normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Pixels enter the network as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 32,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::config("backbone: sizes must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "backbone: patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "backbone: heads {} does not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("backbone: mlp_ratio must be positive"));
        }
        if !self.pixel_mean.is_finite() || !(self.pixel_std.is_finite() && self.pixel_std > 0.0) {
            return Err(Error::config(
                "backbone: pixel_std must be positive and pixel_mean finite",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N_p`, the number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// A single-channel square image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::Shape {
                op: "Image::new",
                expected: vec![side, side],
                got: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("Image::new".into()));
        }
        Ok(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Splits a `height × width` row-major image into raster-ordered patches,
/// each flattened row-major.
pub fn patchify(pixels: &[f64], height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::domain(format!(
            "patchify: patch {patch} does not tile a {height}x{width} image"
        )));
    }
    if pixels.len() != height * width {
        return Err(Error::Shape {
            op: "patchify",
            expected: vec![height, width],
            got: vec![pixels.len()],
        });
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut data = Vec::with_capacity(pixels.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                let start = (pr * patch + y) * width + pc * patch;
                data.extend_from_slice(&pixels[start..start + patch]);
            }
        }
    }
    Tensor::matrix(gh * gw, patch * patch, data)
}

/// Image-level and pixel-level features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `1 × d`
    pub image: Tensor,
    /// `N_p × d`
    pub patches: Tensor,
}

impl FeatureBundle {
    pub fn image_feature(&self) -> &[f64] {
        self.image.data()
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Block {
    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }
}

/// The frozen feature extractor. Weights are fixed at construction and there
/// is no API to mutate them.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    patch_proj: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub image: Var,
    pub patches: Var,
}

/// Handles of the frozen weights after they were placed on a tape.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub all: Vec<Var>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let patch_proj = draw(&[config.patch_dim(), d]);
        let cls_token = draw(&[1, d]);
        let pos_embed = draw(&[config.num_patches() + 1, d]);
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.blocks)
            .map(|_| Block {
                wq: draw(&[d, d]),
                wk: draw(&[d, d]),
                wv: draw(&[d, d]),
                wo: draw(&[d, d]),
                w1: draw(&[d, hidden]),
                b1: draw(&[hidden]),
                w2: draw(&[hidden, d]),
                b2: draw(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            patch_proj,
            cls_token,
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn weights(&self) -> Vec<&Tensor> {
        let mut w = vec![&self.patch_proj, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            w.extend(b.tensors());
        }
        w
    }

    /// SHA-256 over every weight, in a fixed order.
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        for w in self.weights() {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights().iter().map(|w| w.len()).sum()
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side() != self.config.image_size {
            return Err(Error::Shape {
                op: "encode",
                expected: vec![self.config.image_size, self.config.image_size],
                got: vec![image.side(), image.side()],
            });
        }
        Ok(())
    }

    /// Un-prompted features `f_θ(x)`.
    pub fn encode(&self, image: &Image) -> Result<FeatureBundle> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, image, None, false)?;
        Ok(bundle(&tape, out))
    }

    /// Features of the prompt-adapted model `f_φ`.
    pub fn encode_with_prompt(&self, image: &Image, prompt: &Tensor) -> Result<FeatureBundle> {
        let mut tape = Tape::new();
        let p = tape.constant(prompt.clone());
        let (out, _) = self.forward(&mut tape, image, Some(p), false)?;
        Ok(bundle(&tape, out))
    }

    /// Records a forward pass on `tape`. `prompt`, when given, must be an
    /// `L_p × d` node. With `track_weights` the frozen weights are recorded as
    /// gradient-receiving leaves, which only tests use to verify that no
    /// gradient is meant for them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Image,
        prompt: Option<Var>,
        track_weights: bool,
    ) -> Result<(EncodedVars, WeightVars)> {
        self.check_image(image)?;
        let d = self.config.dim;
        if let Some(p) = prompt {
            let shape = tape.value(p).shape().to_vec();
            if shape.len() != 2 || shape[1] != d || shape[0] == 0 {
                return Err(Error::Shape {
                    op: "encode_with_prompt",
                    expected: vec![0, d],
                    got: shape,
                });
            }
        }
        let mut weights = Vec::new();
        let mut put = |tape: &mut Tape, t: &Tensor| {
            let v = tape.leaf(t.clone(), track_weights);
            weights.push(v);
            v
        };

        let side = self.config.image_size;
        let (mean, std) = (self.config.pixel_mean, self.config.pixel_std);
        let pixels: Vec<f64> = image.pixels().iter().map(|x| (x - mean) / std).collect();
        let patches = patchify(&pixels, side, side, self.config.patch_size)?;
        let patches = tape.constant(patches);
        let proj = put(tape, &self.patch_proj);
        let cls = put(tape, &self.cls_token);
        let pos = put(tape, &self.pos_embed);

        let embedded = tape.matmul(patches, proj)?;
        let tokens = tape.concat_rows(&[cls, embedded])?;
        let tokens = tape.add(tokens, pos)?;
        let lp = prompt.map_or(0, |p| tape.value(p).rows());
        let mut x = match prompt {
            Some(p) => tape.concat_rows(&[p, tokens])?,
            None => tokens,
        };

        let heads = self.config.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        for block in &self.blocks {
            let [wq, wk, wv, wo, w1, b1, w2, b2] = block.tensors().map(|t| put(tape, t));

            let h = tape.layer_norm_rows(x)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut head_out = Vec::with_capacity(heads);
            for i in 0..heads {
                let (s, e) = (i * hd, (i + 1) * hd);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let logits = tape.matmul_t(qh, kh)?;
                let logits = tape.scale(logits, scale)?;
                let attn = tape.softmax_rows(logits)?;
                head_out.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&head_out)?;
            let attn_out = tape.matmul(merged, wo)?;
            x = tape.add(x, attn_out)?;

            let h = tape.layer_norm_rows(x)?;
            let h = tape.matmul(h, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, w2)?;
            let h = tape.add_row(h, b2)?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm_rows(x)?;
        let n_tokens = tape.value(x).rows();
        let image_row = tape.slice_rows(x, lp, lp + 1)?;
        let patch_rows = tape.slice_rows(x, lp + 1, n_tokens)?;
        let image_feat = tape.normalize_rows(image_row)?;
        let patch_feat = tape.normalize_rows(patch_rows)?;
        Ok((
            EncodedVars {
                image: image_feat,
                patches: patch_feat,
            },
            WeightVars { all: weights },
        ))
    }
}

fn bundle(tape: &Tape, out: EncodedVars) -> FeatureBundle {
    FeatureBundle {
        image: tape.value(out.image).clone(),
        patches: tape.value(out.patches).clone(),
    }
}
