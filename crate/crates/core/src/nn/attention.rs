use super::config::SaConfig;
use crate::autodiff::{Bound, NodeId, Tape};
use crate::error::{Error, Result};

/// `x: [N, rows, d] x w: [d, e] -> [N, rows, e]`.
pub(crate) fn token_linear(tape: &mut Tape, x: NodeId, w: NodeId) -> Result<NodeId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("token projection of {s:?}")));
    }
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = tape.matmul(flat, w)?;
    let e = tape.shape(y)[1];
    tape.reshape(y, &[s[0], s[1], e])
}

/// Multi-head scaled dot-product self-attention over `x: [N, n, d]`.
///
/// Head `h` uses columns `h*c .. (h+1)*c` of the query, key and value
/// projections; head outputs are concatenated and passed through `w_o`.
pub fn self_attention(tape: &mut Tape, x: NodeId, p: &Bound, prefix: &str, cfg: &SaConfig) -> Result<NodeId> {
    cfg.validate()?;
    let d = cfg.model_dim;
    if tape.shape(x).len() != 3 || tape.shape(x)[2] != d {
        return Err(Error::shape(format!(
            "attention input {:?} for model_dim {d}",
            tape.shape(x)
        )));
    }
    let w = |m: &str| p.get(&format!("{prefix}.{m}"));
    let q = token_linear(tape, x, w("w_q")?)?;
    let k = token_linear(tape, x, w("w_k")?)?;
    let v = token_linear(tape, x, w("w_v")?)?;
    let c = cfg.key_dim();
    let scale = 1.0 / (c as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_last(q, h * c, c)?;
        let kh = tape.slice_last(k, h * c, c)?;
        let vh = tape.slice_last(v, h * c, c)?;
        let kt = tape.transpose_last2(kh)?;
        let scores = tape.batch_matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        heads.push(tape.batch_matmul(attn, vh)?);
    }
    let z = tape.concat(&heads, 2)?;
    token_linear(tape, z, w("w_o")?)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore, Tensor};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(d: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for m in ["w_q", "w_k", "w_v", "w_o"] {
            s.insert(format!("sa.{m}"), random(vec![d, d], rng)).unwrap();
        }
        s
    }

    fn mat(t: &Tensor, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|i| t.data()[i * cols..(i + 1) * cols].to_vec()).collect()
    }

    fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                    .collect()
            })
            .collect()
    }

    /// Per-sample, per-head loops with explicit softmax.
    fn brute(x: &[Vec<f64>], s: &ParamStore, cfg: &SaConfig) -> Vec<Vec<f64>> {
        let d = cfg.model_dim;
        let get = |m: &str| mat(s.get(&format!("sa.{m}")).unwrap(), d, d);
        let (q, k, v) = (mul(x, &get("w_q")), mul(x, &get("w_k")), mul(x, &get("w_v")));
        let n = x.len();
        let c = cfg.key_dim();
        let mut z = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..c).map(|t| q[i][h * c + t] * k[j][h * c + t]).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                for t in 0..c {
                    z[i][h * c + t] = (0..n).map(|j| e[j] / tot * v[j][h * c + t]).sum();
                }
            }
        }
        mul(&z, &get("w_o"))
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SaConfig::new(3, 6).unwrap();
        let s = store(6, &mut rng);
        let x = random(vec![2, 5, 6], &mut rng);
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let xi = tape.leaf(&x);
        let y = self_attention(&mut tape, xi, &p, "sa", &cfg).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 6]);
        for b in 0..2 {
            let xs = mat(
                &Tensor::new(vec![30], x.data()[b * 30..(b + 1) * 30].to_vec()).unwrap(),
                5,
                6,
            );
            let want = brute(&xs, &s, &cfg);
            for i in 0..5 {
                for j in 0..6 {
                    let got = tape.value(y)[b * 30 + i * 6 + j];
                    assert!((got - want[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SaConfig::new(2, 4).unwrap();
        let mut s = store(4, &mut rng);
        for m in ["sa.w_q", "sa.w_k"] {
            s.get_mut(m).unwrap().data_mut().fill(0.0);
        }
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        s.get_mut("sa.w_o").unwrap().data_mut().copy_from_slice(&eye);
        let x = random(vec![1, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let xi = tape.leaf(&x);
        let y = self_attention(&mut tape, xi, &p, "sa", &cfg).unwrap();
        let v = mul(&mat(&x, 3, 4), &mat(s.get("sa.w_v").unwrap(), 4, 4));
        for j in 0..4 {
            let mean = (v[0][j] + v[1][j] + v[2][j]) / 3.0;
            for i in 0..3 {
                assert!((tape.value(y)[i * 4 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_wrt_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SaConfig::new(2, 4).unwrap();
        let s = store(4, &mut rng);
        let x = random(vec![2, 3, 4], &mut rng);
        let r = grad_check(
            |tape, xi| {
                let p = s.bind_frozen(tape);
                let y = self_attention(tape, xi, &p, "sa", &cfg)?;
                let sq = tape.l2_norm_rows(y)?;
                tape.mean(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 24);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = store(4, &mut rng);
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let xi = tape.leaf(&random(vec![1, 3, 5], &mut rng));
        assert!(self_attention(&mut tape, xi, &p, "sa", &SaConfig::new(2, 4).unwrap()).is_err());
    }
}
