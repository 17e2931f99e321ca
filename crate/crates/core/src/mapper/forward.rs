use super::{sinusoidal_pe, Bound, MapperConfig, MapperError, ModelGeometry, StageMode};
use crate::autodiff::{BatchStats, NormMode, Tensor, Var};

/// Whether batch norms use batch statistics (`Train`) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of one recorded forward pass.
pub struct ForwardPass<'t> {
    /// Raw logits `[B, H_l, N]`.
    pub logits: Var<'t>,
    /// Batch statistics per batch-norm prefix, populated in train mode.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Stage-3 attention weights `[B·N, H_l, S]` when that stage is active.
    pub attention: Option<Var<'t>>,
}

/// Records the mapper forward pass for `x[B, H_s, N]` on the tape that
/// `bound` lives on.
pub fn forward_bound<'t>(
    config: &MapperConfig,
    geom: &ModelGeometry,
    bound: &Bound<'_, 't>,
    x: &Tensor,
    mode: Mode,
) -> Result<ForwardPass<'t>, MapperError> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != geom.proxy_heads {
        return Err(MapperError::InputShape {
            expected: format!("[B, {}, N]", geom.proxy_heads),
            actual: shape.to_vec(),
        });
    }
    let (b, n) = (shape[0], shape[2]);
    if n > config.crop_len {
        return Err(MapperError::ExceedsCrop {
            len: n,
            crop_len: config.crop_len,
        });
    }
    let tape = bound
        .vars()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| MapperError::Config("no parameters bound".into()))?;
    let d = config.d_time;
    let mut bn_stats = Vec::new();

    let input = if config.normalize_input {
        normalize_rows(x)
    } else {
        x.clone()
    };
    let xv = tape.constant(input);

    // Stage 1: [B, H_s, N] -> [B, N, D].
    let z = match config.stage_modes.conv {
        StageMode::Active => {
            let pad = config.padding();
            let mut h = xv.conv1d(bound.get("stem.conv1.weight")?, None, pad)?;
            h = batch_norm(bound, "stem.bn1", h, mode, config.bn_eps, &mut bn_stats)?.gelu();
            h = h.conv1d(bound.get("stem.conv2.weight")?, None, pad)?;
            h = batch_norm(bound, "stem.bn2", h, mode, config.bn_eps, &mut bn_stats)?.gelu();
            h.permute(&[0, 2, 1])?
        }
        StageMode::Disabled => xv
            .permute(&[0, 2, 1])?
            .matmul(bound.get("stem.proj.weight")?)?
            .add_bias(bound.get("stem.proj.bias")?)?,
    };

    // Stage 2: token-axis mixing, [B, N, D] -> [B, N, D].
    let z = match config.stage_modes.time {
        StageMode::Active => {
            let pe = sinusoidal_pe(n, d)?;
            let mut tiled = Vec::with_capacity(b * n * d);
            for _ in 0..b {
                tiled.extend_from_slice(pe.data());
            }
            let mut z = z.add(tape.constant(Tensor::new(vec![b, n, d], tiled)?))?;
            for l in 0..config.enc_layers {
                z = encoder_block(config, bound, &format!("encoder.{l}"), z, b, n)?;
            }
            z
        }
        StageMode::Disabled => z.add(z.mean_axis(1)?.expand_axis(1, n)?)?,
    };

    // Stage 3: head-axis cross-attention, [B, N, D] -> [B, H_l, N].
    let s = config.synthetic_heads(geom);
    let dh = config.d_head;
    let hl = geom.target_heads;
    let v = z
        .matmul(bound.get("head.wv")?)?
        .add_bias(bound.get("head.bv")?)?
        .reshape(&[b * n, s, dh])?;
    let (logits, attention) = match config.stage_modes.head {
        StageMode::Active => {
            let k = z.matmul(bound.get("head.wk")?)?.reshape(&[b * n, s, dh])?;
            let p = bound
                .get("head.queries")?
                .matmul_t(k)?
                .scale(1.0 / (dh as f64).sqrt())
                .softmax(2)?;
            let out = p
                .matmul(v)?
                .matmul(bound.get("head.out.weight")?)?
                .add_bias(bound.get("head.out.bias")?)?
                .reshape(&[b, n, hl])?
                .permute(&[0, 2, 1])?;
            (out, Some(p))
        }
        StageMode::Disabled => {
            let out = v
                .mean_axis(1)?
                .matmul(bound.get("head.out.weight")?)?
                .add_bias(bound.get("head.out.bias")?)?
                .reshape(&[b, n])?
                .expand_axis(1, hl)?;
            (out, None)
        }
    };
    Ok(ForwardPass {
        logits,
        bn_stats,
        attention,
    })
}

fn batch_norm<'t>(
    bound: &Bound<'_, 't>,
    prefix: &str,
    h: Var<'t>,
    mode: Mode,
    eps: f64,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var<'t>, MapperError> {
    let gamma = bound.get(&format!("{prefix}.gamma"))?;
    let beta = bound.get(&format!("{prefix}.beta"))?;
    match mode {
        Mode::Train => {
            let (out, batch) = h.batch_norm(gamma, beta, NormMode::Train, eps)?;
            if let Some(batch) = batch {
                stats.push((prefix.to_string(), batch));
            }
            Ok(out)
        }
        Mode::Eval => {
            let params = bound.params();
            let running_mean = params.tensor(&format!("{prefix}.running_mean"))?.data();
            let running_var = params.tensor(&format!("{prefix}.running_var"))?.data();
            let (out, _) = h.batch_norm(
                gamma,
                beta,
                NormMode::Eval {
                    running_mean,
                    running_var,
                },
                eps,
            )?;
            Ok(out)
        }
    }
}

fn encoder_block<'t>(
    config: &MapperConfig,
    bound: &Bound<'_, 't>,
    pre: &str,
    z: Var<'t>,
    b: usize,
    n: usize,
) -> Result<Var<'t>, MapperError> {
    let p = |name: &str| bound.get(&format!("{pre}.{name}"));
    let d = config.d_time;
    let heads = config.enc_heads;
    let hd = d / heads;

    let h = z.layer_norm(p("ln1.gamma")?, p("ln1.beta")?, config.ln_eps)?;
    let split = |t: Var<'t>| -> Result<Var<'t>, MapperError> {
        Ok(t.reshape(&[b, n, heads, hd])?.permute(&[0, 2, 1, 3])?)
    };
    let q = split(h.matmul(p("attn.wq")?)?.add_bias(p("attn.bq")?)?)?;
    let k = split(h.matmul(p("attn.wk")?)?)?;
    let v = split(h.matmul(p("attn.wv")?)?.add_bias(p("attn.bv")?)?)?;
    let attn = q
        .matmul_t(k)?
        .scale(1.0 / (hd as f64).sqrt())
        .softmax(3)?
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?
        .matmul(p("attn.wo")?)?
        .add_bias(p("attn.bo")?)?;
    let z = z.add(attn)?;

    let h = z.layer_norm(p("ln2.gamma")?, p("ln2.beta")?, config.ln_eps)?;
    let f = h
        .matmul(p("ffn.w1")?)?
        .add_bias(p("ffn.b1")?)?
        .gelu()
        .matmul(p("ffn.w2")?)?
        .add_bias(p("ffn.b2")?)?;
    Ok(z.add(f)?)
}

/// Divides every `(batch, head)` row by its mean; rows with zero mean are
/// left unchanged.
fn normalize_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("3-d input");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        if mean.abs() > 0.0 {
            row.iter_mut().for_each(|v| *v /= mean);
        }
    }
    out
}
