use tsdm_tensor::{Tape, Tensor, Var};

use super::params::Bound;
use super::{DenoiserConfig, DenoiserParams};
use crate::error::{Result, TsdmError};

/// Sinusoidal embedding of step `n`: interleaved `(sin, cos)` pairs at
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn time_embed(n: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(TsdmError::invalid(format!(
            "time embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let phase = n as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// Predicts the noise in a normalized `M×T` latent at step `n`.
pub fn predict_noise(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    x: &Tensor,
    n: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, cfg, &bound, xv, n)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn check_input(cfg: &DenoiserConfig, x: &Tensor) -> Result<()> {
    let (m, t) = x.dims2("predict_noise")?;
    if m != cfg.channels_in {
        return Err(TsdmError::invalid(format!(
            "input has {m} channels, network expects {}",
            cfg.channels_in
        )));
    }
    cfg.check_window(t)
}

/// Records the full U-Net on `tape` and returns the `M×T` noise estimate.
pub(crate) fn forward(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    p: &Bound<'_>,
    x: Var,
    n: usize,
) -> Result<Var> {
    check_input(cfg, tape.value(x))?;
    let pad = cfg.kernel / 2;

    let emb = Tensor::new([1, cfg.time_embed_dim], time_embed(n, cfg.time_embed_dim)?)?;
    let emb = tape.constant(emb);
    let t = linear(tape, p, "temb.l1", emb)?;
    let t = tape.silu(t)?;
    let t = linear(tape, p, "temb.l2", t)?;
    let temb = tape.silu(t)?;

    let mut h = conv(tape, p, "in", x, 1, pad)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let tproj = time_projection(tape, p, &format!("enc{d}.temb"), temb)?;
        h = res_block(tape, cfg, p, &format!("enc{d}.res0"), h, tproj)?;
        h = res_block(tape, cfg, p, &format!("enc{d}.res1"), h, tproj)?;
        skips.push(h);
        h = conv(tape, p, &format!("enc{d}.down"), h, 2, pad)?;
    }

    let tproj = time_projection(tape, p, "mid.temb", temb)?;
    h = res_block(tape, cfg, p, "mid.res0", h, tproj)?;
    h = attention_block(tape, cfg, p, h)?;
    h = res_block(tape, cfg, p, "mid.res1", h, tproj)?;

    for d in (0..cfg.depth).rev() {
        let tproj = time_projection(tape, p, &format!("dec{d}.temb"), temb)?;
        let up = tape.upsample_nearest(h, 2)?;
        h = tape.concat_channels(up, skips[d])?;
        h = res_block(tape, cfg, p, &format!("dec{d}.res0"), h, tproj)?;
        h = res_block(tape, cfg, p, &format!("dec{d}.res1"), h, tproj)?;
    }

    let h = tape.group_norm(h, cfg.groups, p.var("out.n.g"), p.var("out.n.b"))?;
    let h = tape.silu(h)?;
    conv(tape, p, "out", h, 1, pad)
}

fn linear(tape: &mut Tape, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.w")))?;
    Ok(tape.add(y, p.var(&format!("{name}.b")))?)
}

fn conv(
    tape: &mut Tape,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = tape.conv1d(x, p.var(&format!("{name}.w")), stride, pad)?;
    Ok(tape.add_channel(y, p.var(&format!("{name}.b")))?)
}

/// Per-stage projection of the step embedding to one offset per channel.
fn time_projection(tape: &mut Tape, p: &Bound<'_>, name: &str, temb: Var) -> Result<Var> {
    let y = linear(tape, p, name, temb)?;
    let c = tape.value(y).numel();
    Ok(tape.reshape(y, [c])?)
}

fn norm_act(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    p: &Bound<'_>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let h = tape.group_norm(
        x,
        cfg.groups,
        p.var(&format!("{name}.g")),
        p.var(&format!("{name}.b")),
    )?;
    Ok(tape.silu(h)?)
}

fn res_block(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    tproj: Var,
) -> Result<Var> {
    let pad = cfg.kernel / 2;
    let h = norm_act(tape, cfg, p, &format!("{name}.n1"), x)?;
    let h = conv(tape, p, &format!("{name}.c1"), h, 1, pad)?;
    let h = tape.add_channel(h, tproj)?;
    let h = norm_act(tape, cfg, p, &format!("{name}.n2"), h)?;
    let h = conv(tape, p, &format!("{name}.c2"), h, 1, pad)?;
    let c_in = tape.value(x).shape()[0];
    let c_out = tape.value(h).shape()[0];
    let skip = if c_in == c_out {
        x
    } else {
        conv(tape, p, &format!("{name}.skip"), x, 1, 0)?
    };
    Ok(tape.add(skip, h)?)
}

fn attention_block(tape: &mut Tape, cfg: &DenoiserConfig, p: &Bound<'_>, x: Var) -> Result<Var> {
    let h = tape.group_norm(x, cfg.groups, p.var("mid.attn.n.g"), p.var("mid.attn.n.b"))?;
    let a = tape.self_attention(
        h,
        p.var("mid.attn.q"),
        p.var("mid.attn.k"),
        p.var("mid.attn.v"),
    )?;
    let a = tape.matmul(p.var("mid.attn.o"), a)?;
    Ok(tape.add(x, a)?)
}
