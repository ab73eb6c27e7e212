use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{classifier_forward, decoder_forward, estimator_forward, extractor_forward, Architecture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Ae,
    Gr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ae => "ae",
            Method::Gr => "gr",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Method::Baseline
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "ae" => Ok(Method::Ae),
            "gr" => Ok(Method::Gr),
            _ => Err(Error::invalid(format!("unknown method `{s}` (baseline | ae | gr)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-row `|| g(z_i) - P_i ||` for normalized targets `[n * 2]`.
pub fn localization_residuals(
    tape: &mut Tape,
    z: NodeId,
    p: &Bound,
    arch: &Architecture,
    targets: &[f64],
) -> Result<NodeId> {
    let n = tape.shape(z)[0];
    if targets.len() != 2 * n {
        return Err(Error::shape(format!("{} target values for {n} rows", targets.len())));
    }
    let y = estimator_forward(tape, z, p, &arch.head)?;
    let t = tape.constant(vec![n, 2], targets.to_vec())?;
    let d = tape.sub(y, t)?;
    tape.l2_norm_rows(d)
}

/// Per-row Frobenius norm of `decoder(z_i) - x_i`.
pub fn reconstruction_residuals(
    tape: &mut Tape,
    z: NodeId,
    x: NodeId,
    p: &Bound,
    arch: &Architecture,
) -> Result<NodeId> {
    let r = decoder_forward(tape, z, p, &arch.extractor)?;
    let d = tape.sub(r, x)?;
    tape.l2_norm_rows(d)
}

/// Per-row BCE of the domain classifier behind a gradient reversal of `lambda`.
pub fn domain_bce(
    tape: &mut Tape,
    z: NodeId,
    p: &Bound,
    arch: &Architecture,
    labels: &[f64],
    lambda: f64,
) -> Result<NodeId> {
    let r = tape.grl(z, lambda);
    let d = classifier_forward(tape, r, p, &arch.head)?;
    tape.bce(d, labels)
}

/// `sum(v) * weight` as a `[1]` node.
pub(crate) fn weighted_sum(tape: &mut Tape, v: NodeId, weight: f64) -> Result<NodeId> {
    let n = tape.value(v).len() as f64;
    let m = tape.mean(v)?;
    Ok(tape.scale(m, n * weight))
}

fn input(tape: &mut Tape, x: &[f64], arch: &Architecture) -> Result<NodeId> {
    let e = &arch.extractor;
    let per = e.in_channels * e.height * e.width;
    if per == 0 || !x.len().is_multiple_of(per) || x.is_empty() {
        return Err(Error::shape(format!("{} input values for rows of {per}", x.len())));
    }
    tape.constant(vec![x.len() / per, e.in_channels, e.height, e.width], x.to_vec())
}

/// Mean localization error of a labeled batch.
pub fn loss_baseline(tape: &mut Tape, p: &Bound, arch: &Architecture, x: &[f64], targets: &[f64]) -> Result<NodeId> {
    let xi = input(tape, x, arch)?;
    let z = extractor_forward(tape, xi, p, &arch.extractor)?;
    let r = localization_residuals(tape, z, p, arch, targets)?;
    tape.mean(r)
}

/// Mean localization error on the labeled batch plus mean reconstruction
/// error on the unlabeled batch `x_dom` (drawn from both domains).
pub fn loss_ae(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    x: &[f64],
    targets: &[f64],
    x_dom: &[f64],
) -> Result<NodeId> {
    let loc = loss_baseline(tape, p, arch, x, targets)?;
    let xd = input(tape, x_dom, arch)?;
    let z = extractor_forward(tape, xd, p, &arch.extractor)?;
    let r = reconstruction_residuals(tape, z, xd, p, arch)?;
    let rec = tape.mean(r)?;
    tape.add(loc, rec)
}

/// Mean localization error plus mean domain BCE. The BCE enters with a
/// positive sign; the reversal layer makes the extractor ascend it.
#[allow(clippy::too_many_arguments)]
pub fn loss_gr(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    x: &[f64],
    targets: &[f64],
    x_dom: &[f64],
    domain_labels: &[f64],
    lambda: f64,
) -> Result<NodeId> {
    if domain_labels.iter().any(|&d| d != 0.0 && d != 1.0) {
        return Err(Error::MissingLabel(
            "domain labels must be 0 (source) or 1 (target)".into(),
        ));
    }
    let loc = loss_baseline(tape, p, arch, x, targets)?;
    let xd = input(tape, x_dom, arch)?;
    let z = extractor_forward(tape, xd, p, &arch.extractor)?;
    let b = domain_bce(tape, z, p, arch, domain_labels, lambda)?;
    let bce = tape.mean(b)?;
    tape.add(loc, bce)
}

/// Values of one training chunk's graph.
pub(crate) struct ChunkGraph {
    pub total: NodeId,
    pub loc_sum: f64,
    pub aux_sum: f64,
}

/// One chunk of a training step. Source rows pass the extractor once; the
/// first `half` of them also join the target rows in the domain batch.
/// Sums are divided by the whole step's row counts so that chunk gradients
/// add up to the minibatch gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn chunk_graph(
    tape: &mut Tape,
    p: &Bound,
    arch: &Architecture,
    method: Method,
    lambda: f64,
    x_src: &[f64],
    targets: &[f64],
    x_tgt: &[f64],
    half: usize,
    loc_rows: usize,
    dom_rows: usize,
) -> Result<ChunkGraph> {
    let xs = input(tape, x_src, arch)?;
    let zs = extractor_forward(tape, xs, p, &arch.extractor)?;
    let lr = localization_residuals(tape, zs, p, arch, targets)?;
    let loc_sum: f64 = tape.value(lr).iter().sum();
    let loc = weighted_sum(tape, lr, 1.0 / loc_rows as f64)?;
    if method == Method::Baseline {
        return Ok(ChunkGraph {
            total: loc,
            loc_sum,
            aux_sum: 0.0,
        });
    }
    let xt = input(tape, x_tgt, arch)?;
    let zt = extractor_forward(tape, xt, p, &arch.extractor)?;
    let za = tape.slice_rows(zs, 0, half)?;
    let n_t = tape.shape(zt)[0];
    let aux = match method {
        Method::Ae => {
            let xa = tape.slice_rows(xs, 0, half)?;
            let ra = reconstruction_residuals(tape, za, xa, p, arch)?;
            let rt = reconstruction_residuals(tape, zt, xt, p, arch)?;
            tape.concat(&[ra, rt], 0)?
        }
        Method::Gr => {
            let z = tape.concat(&[za, zt], 0)?;
            let labels: Vec<f64> = (0..half + n_t).map(|i| if i < half { 0.0 } else { 1.0 }).collect();
            domain_bce(tape, z, p, arch, &labels, lambda)?
        }
        Method::Baseline => unreachable!("handled above"),
    };
    let aux_sum: f64 = tape.value(aux).iter().sum();
    let aux = weighted_sum(tape, aux, 1.0 / dom_rows as f64)?;
    Ok(ChunkGraph {
        total: tape.add(loc, aux)?,
        loc_sum,
        aux_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_params, ParamStore, Probe, Selection};
    use crate::nn::{init_all, ConvLayer, EstimatorConfig, ExtractorConfig, SaConfig};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Architecture {
        let layer = ConvLayer {
            filters: 3,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        Architecture {
            extractor: ExtractorConfig {
                in_channels: 2,
                height: 4,
                width: 4,
                conv: vec![layer; 2],
                sa: Some(SaConfig::new(1, 2).unwrap()),
                output_dim: 4,
            },
            head: EstimatorConfig {
                input_dim: 4,
                widths: vec![3, 2],
            },
        }
    }

    fn randoms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn value(params: &ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Result<NodeId>) -> f64 {
        let mut t = Tape::new();
        let b = params.bind_frozen(&mut t);
        let o = f(&mut t, &b).unwrap();
        t.value(o)[0]
    }

    #[test]
    fn baseline_examples() {
        let arch = Architecture::reference(16, 32);
        let mut params = init_all(&arch, 1, false, false).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        params
            .get_mut("estimator.fc2.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[3.0, 4.0]);
        let x = vec![0.0; 1024];
        let v = value(&params, &|t, b| loss_baseline(t, b, &arch, &x, &[0.0, 0.0]));
        assert_eq!(v, 5.0);
        let v = value(&params, &|t, b| loss_baseline(t, b, &arch, &x, &[3.0, 4.0]));
        assert_eq!(v, 0.0);
        assert!(matches!(value_err(&params, &arch, &x), Err(Error::ShapeMismatch(_))));
    }

    fn value_err(params: &ParamStore, arch: &Architecture, x: &[f64]) -> Result<NodeId> {
        let mut t = Tape::new();
        let b = params.bind_frozen(&mut t);
        loss_baseline(&mut t, &b, arch, x, &[0.0])
    }

    #[test]
    fn ae_with_zero_network_is_mean_target_norm() {
        let arch = Architecture::reference(16, 32);
        let mut params = init_all(&arch, 2, true, false).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let x = vec![0.0; 2048];
        let v = value(&params, &|t, b| loss_ae(t, b, &arch, &x, &[3.0, 4.0, 0.0, 1.0], &x));
        assert_eq!(v, 3.0);
    }

    #[test]
    fn gr_at_half_probability_is_ln2() {
        let arch = Architecture::reference(16, 32);
        let mut params = init_all(&arch, 3, false, true).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("classifier.fc2") {
                t.data_mut().fill(0.0);
            }
        }
        let x = randoms(2048, 1);
        let v_gr = value(&params, &|t, b| {
            loss_gr(t, b, &arch, &x, &[0.1, 0.2, 0.3, 0.4], &x, &[0.0, 1.0], 1.0)
        });
        let v_base = value(&params, &|t, b| loss_baseline(t, b, &arch, &x, &[0.1, 0.2, 0.3, 0.4]));
        assert!((v_gr - v_base - std::f64::consts::LN_2).abs() < 1e-12);
        let mut t = Tape::new();
        let b = params.bind_frozen(&mut t);
        assert!(matches!(
            loss_gr(&mut t, &b, &arch, &x, &[0.0; 4], &x, &[0.0, 0.5], 1.0),
            Err(Error::MissingLabel(_))
        ));
    }

    fn analytic(params: &ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Result<NodeId>) -> Vec<Vec<f64>> {
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let o = f(&mut t, &b).unwrap();
        let mut g = t.backward(o).unwrap();
        params.collect_grads(&b, &mut g)
    }

    fn fd_check(params: &ParamStore, grads: &[Vec<f64>], f: &dyn Fn(&mut Tape, &Bound) -> Result<NodeId>) {
        let r = check_params(
            params,
            grads,
            |ps| {
                let mut t = Tape::new();
                let b = ps.bind_frozen(&mut t);
                let o = f(&mut t, &b)?;
                Probe::of(&t, o)
            },
            1e-6,
            &Selection::all_tensors(4, 5),
        )
        .unwrap();
        assert!(r.checked > 20, "{r:?}");
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn ae_gradients_and_decoupling() {
        let arch = tiny();
        let params = init_all(&arch, 14, true, false).unwrap();
        let x = randoms(3 * 32, 2);
        let xd = randoms(2 * 32, 3);
        let y = randoms(6, 4);
        let full = |t: &mut Tape, b: &Bound| loss_ae(t, b, &arch, &x, &y, &xd);
        let g = analytic(&params, &full);
        fd_check(&params, &g, &full);
        let loc_only = analytic(&params, &|t, b| loss_baseline(t, b, &arch, &x, &y));
        for (i, name) in params.names().iter().enumerate() {
            if name.starts_with("estimator.") {
                assert_eq!(g[i], loc_only[i], "{name}");
            }
            if name.starts_with("decoder.") {
                assert!(loc_only[i].iter().all(|&v| v == 0.0), "{name}");
                assert!(g[i].iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gr_gradients_and_reversal_sign() {
        let arch = tiny();
        let params = init_all(&arch, 15, false, true).unwrap();
        let x = randoms(3 * 32, 6);
        let xd = randoms(4 * 32, 7);
        let y = randoms(6, 8);
        let d = [0.0, 0.0, 1.0, 1.0];
        let lambda = 0.7;
        // With the sign of the reversal flipped, plain descent on the total
        // is what the finite differences of loc - lambda * bce measure for
        // the extractor, and of loc + bce for the classifier.
        let g = analytic(&params, &|t, b| loss_gr(t, b, &arch, &x, &y, &xd, &d, lambda));
        let adversarial = |t: &mut Tape, b: &Bound| {
            let loc = loss_baseline(t, b, &arch, &x, &y)?;
            let xi = input(t, &xd, &arch)?;
            let z = extractor_forward(t, xi, b, &arch.extractor)?;
            let bce = domain_bce(t, z, b, &arch, &d, 1.0)?;
            let m = t.mean(bce)?;
            let m = t.scale(m, -lambda);
            t.add(loc, m)
        };
        let extractor = params.filtered(|n| n.starts_with("extractor.") || n.starts_with("estimator."));
        let r = check_params(
            &extractor,
            &pick(&params, &g, &extractor),
            |ps| {
                let all = overlay(&params, ps);
                let mut t = Tape::new();
                let b = all.bind_frozen(&mut t);
                let o = adversarial(&mut t, &b)?;
                Probe::of(&t, o)
            },
            1e-6,
            &Selection::all_tensors(4, 9),
        )
        .unwrap();
        assert!(r.checked > 20 && r.max_rel_error < 1e-5, "{r:?}");
        let classifier = params.filtered(|n| n.starts_with("classifier."));
        let r = check_params(
            &classifier,
            &pick(&params, &g, &classifier),
            |ps| {
                let all = overlay(&params, ps);
                let mut t = Tape::new();
                let b = all.bind_frozen(&mut t);
                let o = loss_gr(&mut t, &b, &arch, &x, &y, &xd, &d, lambda)?;
                Probe::of(&t, o)
            },
            1e-6,
            &Selection::all_tensors(4, 10),
        )
        .unwrap();
        assert!(r.checked > 10 && r.max_rel_error < 1e-5, "{r:?}");
    }

    fn pick(all: &ParamStore, grads: &[Vec<f64>], sub: &ParamStore) -> Vec<Vec<f64>> {
        all.names()
            .iter()
            .zip(grads)
            .filter(|(n, _)| sub.get(n).is_some())
            .map(|(_, v)| v.clone())
            .collect()
    }

    fn overlay(all: &ParamStore, sub: &ParamStore) -> ParamStore {
        let mut out = all.clone();
        for (n, t) in sub.iter() {
            *out.get_mut(n).unwrap() = t.clone();
        }
        out
    }

    #[test]
    fn reversal_scales_classifier_path_by_minus_lambda() {
        let arch = tiny();
        let params = init_all(&arch, 6, false, true).unwrap();
        let xd = randoms(4 * 32, 11);
        let d = [0.0, 1.0, 0.0, 1.0];
        let path = |lambda: Option<f64>| {
            analytic(&params, &|t, b| {
                let xi = input(t, &xd, &arch)?;
                let z = extractor_forward(t, xi, b, &arch.extractor)?;
                let bce = match lambda {
                    Some(l) => domain_bce(t, z, b, &arch, &d, l)?,
                    None => {
                        let p = classifier_forward(t, z, b, &arch.head)?;
                        t.bce(p, &d)?
                    }
                };
                t.mean(bce)
            })
        };
        let plain = path(None);
        let lambda = 0.37;
        let reversed = path(Some(lambda));
        for (i, name) in params.names().iter().enumerate() {
            for (a, b) in reversed[i].iter().zip(&plain[i]) {
                if name.starts_with("extractor.") {
                    assert!((a + lambda * b).abs() <= 1e-12 * b.abs().max(1e-3), "{name}");
                } else {
                    assert_eq!(a, b, "{name}");
                }
            }
        }
    }
}
