//! Two-way attention mask decoder with a mask-token output head.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use super::layers::{self, Registrar};
use super::ModelConfig;
use crate::params::{normal, Binder};
use crate::tape::Var;
use crate::{Error, Result};

pub(crate) fn register<R: Rng>(reg: &mut Registrar<R>, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    let inner = d / cfg.attention_downsample;
    let mask_token = normal(reg.rng, 1, d, 1.0);
    reg.raw("decoder.mask_token", mask_token)?;
    for l in 0..cfg.decoder_blocks {
        let p = format!("decoder.block{l}");
        reg.attention(&format!("{p}.self_attn"), d, d)?;
        reg.layer_norm(&format!("{p}.norm1"), d)?;
        reg.attention(&format!("{p}.cross_t2i"), d, inner)?;
        reg.mlp(&format!("{p}.mlp_p"), d, cfg.mlp_hidden, d)?;
        reg.layer_norm(&format!("{p}.norm2"), d)?;
        reg.attention(&format!("{p}.cross_i2t"), d, inner)?;
        reg.mlp(&format!("{p}.mlp_i"), d, cfg.mlp_hidden, d)?;
        reg.layer_norm(&format!("{p}.norm3"), d)?;
    }
    reg.attention("decoder.final_attn", d, inner)?;
    reg.layer_norm("decoder.final_norm", d)?;
    let [c1, c2] = cfg.upscale_channels;
    reg.linear("decoder.up1", d, 4 * c1)?;
    reg.layer_norm("decoder.up_norm", c1)?;
    reg.linear("decoder.up2", c1, 4 * c2)?;
    reg.linear("decoder.hyper.l0", d, d)?;
    reg.linear("decoder.hyper.l1", d, d)?;
    reg.linear("decoder.hyper.l2", d, c2)
}

/// Gather index turning the `(h*w) x 4c` output of a stride-2, kernel-2
/// transposed convolution (as a per-token matmul) into a `(2h*2w) x c` grid.
fn pixel_shuffle_index(h: usize, w: usize, c: usize) -> Rc<[usize]> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let n = (oy / 2) * w + ox / 2;
            let k = (oy % 2) * 2 + ox % 2;
            for ch in 0..c {
                idx.push(n * 4 * c + k * c + ch);
            }
        }
    }
    idx.into()
}

/// Linear interpolation matrix (`out x len`) with half-pixel centers and
/// edge clamping.
pub fn bilinear_matrix(out: usize, len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, len));
    let ratio = len as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

fn check_finite(b: &Binder, v: Var, block: usize) -> Result<()> {
    if b.tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: "decoder",
            block,
        })
    }
}

/// Decodes one class. `image` and `image_pe` are `(gh*gw) x d`; `prompts` is
/// `m x d` with `m >= 0`. Returns `image_size x image_size` logits.
pub(crate) fn decode_on(
    b: &mut Binder,
    cfg: &ModelConfig,
    image: Var,
    image_pe: Var,
    prompts: Option<Var>,
) -> Result<Var> {
    let heads = cfg.heads;
    let mask_token = b.param("decoder.mask_token");
    let tokens = match prompts {
        Some(p) => b.tape.concat_rows(&[mask_token, p]),
        None => mask_token,
    };
    let query_pe = tokens;
    let mut t = tokens;
    let mut f = image;
    for l in 0..cfg.decoder_blocks {
        let p = format!("decoder.block{l}");
        // Prompt self-attention.
        let q = b.tape.add(t, query_pe);
        let sa = layers::attention(b, &format!("{p}.self_attn"), q, q, t, heads);
        let sum = b.tape.add(t, sa);
        t = layers::layer_norm(b, &format!("{p}.norm1"), sum);
        // Prompt-to-image cross-attention followed by the prompt MLP.
        let q = b.tape.add(t, query_pe);
        let k = b.tape.add(f, image_pe);
        let ca = layers::attention(b, &format!("{p}.cross_t2i"), q, k, f, heads);
        let m = layers::mlp(b, &format!("{p}.mlp_p"), ca);
        let sum = b.tape.add(t, m);
        t = layers::layer_norm(b, &format!("{p}.norm2"), sum);
        // Image-to-prompt cross-attention followed by the image MLP.
        let q = b.tape.add(f, image_pe);
        let k = b.tape.add(t, query_pe);
        let ci = layers::attention(b, &format!("{p}.cross_i2t"), q, k, t, heads);
        let m = layers::mlp(b, &format!("{p}.mlp_i"), ci);
        let sum = b.tape.add(f, m);
        f = layers::layer_norm(b, &format!("{p}.norm3"), sum);
        check_finite(b, t, l)?;
        check_finite(b, f, l)?;
    }
    let q = b.tape.add(t, query_pe);
    let k = b.tape.add(f, image_pe);
    let a = layers::attention(b, "decoder.final_attn", q, k, f, heads);
    let sum = b.tape.add(t, a);
    t = layers::layer_norm(b, "decoder.final_norm", sum);

    let d = cfg.d_model;
    let mask_out = b.tape.gather(t, (0..d).collect::<Vec<_>>().into(), 1, d);
    let mut h = layers::linear(b, "decoder.hyper.l0", mask_out);
    h = b.tape.gelu(h);
    h = layers::linear(b, "decoder.hyper.l1", h);
    h = b.tape.gelu(h);
    h = layers::linear(b, "decoder.hyper.l2", h);

    let (gh, gw) = cfg.grid();
    let [c1, c2] = cfg.upscale_channels;
    let u = layers::linear(b, "decoder.up1", f);
    let u = b.tape.gather(u, pixel_shuffle_index(gh, gw, c1), 4 * gh * gw, c1);
    let u = layers::layer_norm(b, "decoder.up_norm", u);
    let u = b.tape.gelu(u);
    let u = layers::linear(b, "decoder.up2", u);
    let u = b
        .tape
        .gather(u, pixel_shuffle_index(2 * gh, 2 * gw, c2), 16 * gh * gw, c2);
    let u = b.tape.gelu(u);

    let low = b.tape.matmul_nt(u, h);
    let low = b.tape.reshape(low, 4 * gh, 4 * gw);
    let s = cfg.image_size;
    let uy = b.tape.constant(bilinear_matrix(s, 4 * gh));
    let ux = b.tape.constant(bilinear_matrix(s, 4 * gw));
    let rows = b.tape.matmul(uy, low);
    let logits = b.tape.matmul_nt(rows, ux);
    check_finite(b, logits, cfg.decoder_blocks)?;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_and_matches_halfpixel() {
        let m = bilinear_matrix(8, 4);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        // Output pixel 1 samples source 0.25 between pixels 0 and 1.
        assert!((m[[1, 0]] - 0.75).abs() < 1e-12);
        assert!((m[[1, 1]] - 0.25).abs() < 1e-12);
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[7, 3]], 1.0);
        assert_eq!(bilinear_matrix(5, 5), Array2::<f64>::eye(5));
    }

    #[test]
    fn pixel_shuffle_layout() {
        // One token, two channels: column k*c + ch lands at sub-pixel k.
        let idx = pixel_shuffle_index(1, 1, 2);
        assert_eq!(&*idx, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let idx = pixel_shuffle_index(1, 2, 1);
        // Output row 0: tokens 0,0,1,1 at kernel cols 0,1,0,1.
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[4..], &[2, 3, 6, 7]);
    }
}
