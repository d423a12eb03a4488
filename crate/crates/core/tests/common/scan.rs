use ssm_circuits::model::{DtProjection, Model};
use ssm_circuits::tensor::{softplus, Tensor};

/// Unrolled oracle: y_t = sum_{s<=t} C_t · (prod_{s<r<=t} Ā_r) B̄_s x_s + D x_t.
pub fn scan_oracle(model: &Model, layer: usize, x: &Tensor) -> Tensor {
    let p = &model.layers[layer];
    let (b, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = model.config().d_state;
    let w_dt = match &p.dt {
        DtProjection::Full { weight } => (**weight).clone(),
        DtProjection::LowRank { down, up } => up.matmul(down).unwrap(),
    };
    let mut y = Tensor::zeros(&[b, l, e]);
    for bi in 0..b {
        let xv = |t: usize, j: usize| x.get(&[bi, t, j]);
        let delta = |t: usize, ei: usize| {
            let mut s = p.dt_bias.get(&[ei]);
            for j in 0..e {
                s += w_dt.get(&[ei, j]) * xv(t, j);
            }
            softplus(s)
        };
        let proj =
            |w: &Tensor, t: usize, k: usize| (0..e).map(|j| w.get(&[k, j]) * xv(t, j)).sum::<f64>();
        for t in 0..l {
            for ei in 0..e {
                let mut acc = p.d_skip.get(&[ei]) * xv(t, ei);
                for k in 0..n {
                    let a = p.a_log.get(&[ei, k]).exp();
                    for s in 0..=t {
                        let mut decay = 1.0;
                        for r in s + 1..=t {
                            decay *= (-delta(r, ei) * a).exp();
                        }
                        acc += proj(&p.w_c, t, k)
                            * decay
                            * delta(s, ei)
                            * proj(&p.w_b, s, k)
                            * xv(s, ei);
                    }
                }
                y.set(&[bi, t, ei], acc);
            }
        }
    }
    y
}
