use super::attention::{self_attention, token_linear};
use super::config::{EstimatorConfig, ExtractorConfig};
use super::init::Role;
use crate::autodiff::{Bound, NodeId, Tape};
use crate::error::{Error, Result};

fn param(p: &Bound, role: Role, name: &str) -> Result<NodeId> {
    p.get(&format!("{}.{name}", role.prefix()))
}

fn dense(tape: &mut Tape, x: NodeId, p: &Bound, role: Role, name: &str) -> Result<NodeId> {
    let y = tape.matmul(x, param(p, role, &format!("{name}.weight"))?)?;
    tape.add(y, param(p, role, &format!("{name}.bias"))?)
}

/// `x: [N, C, H, W]` fingerprint tensors to `[N, B]` features.
pub fn extractor_forward(tape: &mut Tape, x: NodeId, p: &Bound, cfg: &ExtractorConfig) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1..] != [cfg.in_channels, cfg.height, cfg.width] {
        return Err(Error::shape(format!(
            "extractor expects [N, {}, {}, {}], got {s:?}",
            cfg.in_channels, cfg.height, cfg.width
        )));
    }
    let n = s[0];
    let role = Role::Extractor;
    let mut h = x;
    for (i, l) in cfg.conv.iter().enumerate() {
        let w = param(p, role, &format!("conv{i}.weight"))?;
        let b = param(p, role, &format!("conv{i}.bias"))?;
        h = tape.conv2d(h, w, Some(b), l.spec())?;
        h = tape.relu(h);
    }
    let ch = cfg.last_channels();
    let n_tok = cfg.n_tokens()?;
    let grid = tape.reshape(h, &[n, ch, n_tok])?;
    let tokens = tape.transpose_last2(grid)?;
    let feat = match &cfg.sa {
        Some(sa) => {
            let proj = token_linear(tape, tokens, param(p, role, "sa.w_in")?)?;
            let att = self_attention(tape, proj, p, "extractor.sa", sa)?;
            tape.concat(&[tokens, att], 2)?
        }
        None => tokens,
    };
    let flat = tape.reshape(feat, &[n, cfg.flat_dim()?])?;
    let z = dense(tape, flat, p, role, "fc")?;
    Ok(tape.relu(z))
}

/// `[N, B]` features back to `[N, C, H, W]` fingerprint tensors.
pub fn decoder_forward(tape: &mut Tape, z: NodeId, p: &Bound, cfg: &ExtractorConfig) -> Result<NodeId> {
    let s = tape.shape(z).to_vec();
    if s.len() != 2 || s[1] != cfg.output_dim {
        return Err(Error::shape(format!(
            "decoder expects [N, {}], got {s:?}",
            cfg.output_dim
        )));
    }
    let role = Role::Decoder;
    let sizes = cfg.spatial_sizes()?;
    let (gh, gw) = *sizes.last().expect("non-empty");
    let h = dense(tape, z, p, role, "fc")?;
    let h = tape.relu(h);
    let mut h = tape.reshape(h, &[s[0], cfg.last_channels(), gh, gw])?;
    for i in (0..cfg.conv.len()).rev() {
        let w = param(p, role, &format!("deconv{i}.weight"))?;
        let b = param(p, role, &format!("deconv{i}.bias"))?;
        h = tape.conv_transpose2d(h, w, Some(b), cfg.conv[i].spec())?;
        if i > 0 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn head(tape: &mut Tape, z: NodeId, p: &Bound, role: Role, cfg: &EstimatorConfig) -> Result<NodeId> {
    let s = tape.shape(z);
    if s.len() != 2 || s[1] != cfg.input_dim {
        return Err(Error::shape(format!("head expects [N, {}], got {s:?}", cfg.input_dim)));
    }
    let mut h = z;
    let last = cfg.widths.len() - 1;
    for i in 0..=last {
        h = dense(tape, h, p, role, &format!("fc{i}"))?;
        if i < last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// `[N, B]` features to `[N, 2]` normalized positions.
pub fn estimator_forward(tape: &mut Tape, z: NodeId, p: &Bound, cfg: &EstimatorConfig) -> Result<NodeId> {
    head(tape, z, p, Role::Estimator, cfg)
}

/// `[N, B]` features to `[N]` probabilities of the target domain.
pub fn classifier_forward(tape: &mut Tape, z: NodeId, p: &Bound, cfg: &EstimatorConfig) -> Result<NodeId> {
    let logits = head(tape, z, p, Role::Classifier, cfg)?;
    let probs = tape.softmax(logits)?;
    let target = tape.slice_last(probs, 1, 1)?;
    let n = tape.shape(z)[0];
    tape.reshape(target, &[n])
}
