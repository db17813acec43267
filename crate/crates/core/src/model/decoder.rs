//! Prompt encoder and mask decoder.

use super::prompt::Prompt;
use super::SegModel;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// `3×(h·w)` fixed coordinate features `(u, v, u²+v²)` at cell centres,
/// normalized to `(0, 1)`.
pub fn coordinate_channels<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let i = y * w + x;
            data[i] = T::lit(u);
            data[h * w + i] = T::lit(v);
            data[2 * h * w + i] = T::lit(u * u + v * v);
        }
    }
    Tensor::leaf(data, vec![3, h, w], false).reshape(&[3, h * w]).expect("numel matches")
}

impl<T: Scalar> SegModel<T> {
    /// One row per prompt element: box corners first (corner-role embedding),
    /// then points (polarity embedding), each plus a linear map of
    /// `(x/W, y/H)`.
    pub fn encode_prompt(&self, prompt: &Prompt, (h, w): (usize, usize)) -> Result<Tensor<T>> {
        prompt.validate((h, w))?;
        let mut coords = Vec::with_capacity(2 * prompt.rows());
        let push = |x: usize, y: usize, coords: &mut Vec<T>| {
            coords.push(T::lit(x as f64 / w as f64));
            coords.push(T::lit(y as f64 / h as f64));
        };
        let mut roles = Vec::new();
        if let Some(b) = prompt.bbox {
            roles.push(self.p("prompt.corner").gather_rows(&[0, 1])?);
            push(b.x0, b.y0, &mut coords);
            push(b.x1, b.y1, &mut coords);
        }
        if !prompt.points.is_empty() {
            let role_rows: Vec<usize> = prompt.points.iter().map(|p| p.polarity.index()).collect();
            roles.push(self.p("prompt.polarity").gather_rows(&role_rows)?);
            for p in &prompt.points {
                push(p.x, p.y, &mut coords);
            }
        }
        let n = prompt.rows();
        let xy = Tensor::leaf(coords, vec![n, 2], false);
        Tensor::concat(&roles, 0)?.add(&xy.matmul(self.p("prompt.coord"))?)
    }

    /// Decodes logits at image resolution `out` from `z_img` (`C×h×w`), the
    /// prompt rows `z_vp` (`N×C`) and the projected semantic vector `z_bar`
    /// (length `C`). Returns `(logits, P)`, both `H×W`.
    pub fn decode_mask(
        &self,
        z_img: &Tensor<T>,
        z_vp: &Tensor<T>,
        z_bar: &Tensor<T>,
        out: (usize, usize),
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = self.hyper.channels;
        if z_img.rank() != 3 || z_img.shape()[0] != c || z_vp.rank() != 2 || z_vp.shape()[1] != c || z_bar.numel() != c
        {
            return shape_err(format!(
                "decoder expects {c} channels, got z_img {:?}, z_vp {:?}, z_bar {:?}",
                z_img.shape(),
                z_vp.shape(),
                z_bar.shape()
            ));
        }
        let (h, w) = (z_img.shape()[1], z_img.shape()[2]);
        let hw = h * w;
        let feats = z_img.reshape(&[c, hw])?;
        let enhanced = Tensor::concat(&[z_vp.clone(), z_bar.reshape(&[1, c])?], 0)?;
        let rows = enhanced.shape()[0];

        let kv_in = Tensor::concat(&[feats.clone(), coordinate_channels(h, w)], 0)?.t()?;
        let q = enhanced.matmul(self.p("decoder.wq"))?;
        let k = kv_in.matmul(self.p("decoder.wk"))?;
        let v = kv_in.matmul(self.p("decoder.wv"))?;
        let scale = T::one() / T::count(c).sqrt();
        let attn = q.matmul(&k.t()?)?.scale(scale).softmax(1)?;
        let tokens = enhanced.add(&attn.matmul(&v)?)?;

        let ones = Tensor::ones(&[1, rows]);
        let summary_map = ones.matmul(&tokens.matmul(self.p("decoder.wm"))?)?.matmul(&feats)?;
        let gates = tokens.matmul(self.p("decoder.gate"))?.t()?;
        let click_map = gates.matmul(&attn)?.scale(T::count(hw));

        let stacked = Tensor::concat(&[feats, summary_map, click_map], 0)?;
        let low = self.p("decoder.head.weight").matmul(&stacked)?.add(self.p("decoder.head.bias"))?;
        let logits = low.reshape(&[1, h, w])?.bilinear_upsample(out)?.reshape(&[out.0, out.1])?;
        let p = logits.sigmoid();
        Ok((logits, p))
    }
}
