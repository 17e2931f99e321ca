use super::{HybridAxialMapper, MapperError, Mode};
use crate::autodiff::Tensor;

/// Start offsets of the `crop`-token windows covering `n` tokens: multiples
/// of `stride`, plus a final right-aligned window ending at `n`.
pub fn window_offsets(n: usize, crop: usize, stride: usize) -> Vec<usize> {
    if n <= crop {
        return vec![0];
    }
    let mut offsets = Vec::new();
    let mut off = 0;
    while off + crop < n {
        offsets.push(off);
        off += stride;
    }
    let last = n - crop;
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    offsets
}

pub(super) fn sliding_forward(
    mapper: &HybridAxialMapper,
    x: &Tensor,
    mode: Mode,
) -> Result<Tensor, MapperError> {
    if mode == Mode::Train {
        return Err(MapperError::TrainModeWindow);
    }
    let cfg = mapper.config();
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(MapperError::InputShape {
            expected: "[B, H_s, N]".into(),
            actual: shape.to_vec(),
        });
    }
    let (b, hs, n) = (shape[0], shape[1], shape[2]);
    if n <= cfg.crop_len {
        return mapper.forward_pair(x, mode);
    }
    let crop = cfg.crop_len;
    let hl = mapper.geometry().target_heads;
    let mut sum = vec![0.0; b * hl * n];
    let mut count = vec![0u32; n];
    for off in window_offsets(n, crop, cfg.stride) {
        let mut data = Vec::with_capacity(b * hs * crop);
        for row in x.data().chunks_exact(n) {
            data.extend_from_slice(&row[off..off + crop]);
        }
        let y = mapper.forward_pair(&Tensor::new(vec![b, hs, crop], data)?, mode)?;
        for (dst, src) in sum.chunks_exact_mut(n).zip(y.data().chunks_exact(crop)) {
            for (d, s) in dst[off..off + crop].iter_mut().zip(src) {
                *d += s;
            }
        }
        for c in &mut count[off..off + crop] {
            *c += 1;
        }
    }
    for row in sum.chunks_exact_mut(n) {
        for (v, &c) in row.iter_mut().zip(&count) {
            *v /= f64::from(c);
        }
    }
    Ok(Tensor::new(vec![b, hl, n], sum)?)
}
