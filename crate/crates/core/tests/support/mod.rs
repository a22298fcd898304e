//! Reference implementations written as plain scalar loops, independent of
//! the tape engine.
#![allow(dead_code, clippy::needless_range_loop)]

use sentiment_core::model::BiLstmAttention;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn param<'a>(model: &'a BiLstmAttention, name: &str) -> &'a [f64] {
    let p = model.params();
    p.get(p.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).values()
}

/// One LSTM direction over `xs` (valid positions only). Weights are
/// `[4h, in]` row-major with gate blocks input, forget, candidate, output.
pub fn lstm_scalar(xs: &[Vec<f64>], w_in: &[f64], w_rec: &[f64], bias: &[f64], h: usize, reverse: bool) -> Vec<Vec<f64>> {
    let n = xs.len();
    let input = if n > 0 { xs[0].len() } else { 0 };
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut out = vec![vec![0.0; h]; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut z = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for (q, zq) in z.iter_mut().enumerate() {
            for k in 0..h {
                let row = q * h + k;
                let mut acc = bias[row];
                for j in 0..input {
                    acc += w_in[row * input + j] * xs[t][j];
                }
                for j in 0..h {
                    acc += w_rec[row * h + j] * hs[j];
                }
                zq[k] = acc;
            }
        }
        for k in 0..h {
            let i = sigmoid(z[0][k]);
            let f = sigmoid(z[1][k]);
            let g = z[2][k].tanh();
            let o = sigmoid(z[3][k]);
            cs[k] = f * cs[k] + i * g;
            hs[k] = o * cs[k].tanh();
        }
        out[t] = hs.clone();
    }
    out
}

/// Bidirectional encoder for one sequence: `max_len` rows of width `2h`,
/// zero past `length`.
pub fn bilstm_scalar(model: &BiLstmAttention, indices: &[usize], length: usize) -> Vec<Vec<f64>> {
    let c = model.config();
    let (d, h, l) = (c.embed_dim, c.hidden_dim, c.max_len);
    let emb = param(model, "embedding");
    let mut xs: Vec<Vec<f64>> = indices[..length].iter().map(|&i| emb[i * d..(i + 1) * d].to_vec()).collect();
    for layer in 0..c.num_layers {
        let run = |dir: &str, reverse: bool| {
            let pre = format!("lstm{layer}.{dir}");
            lstm_scalar(
                &xs,
                param(model, &format!("{pre}.w_input")),
                param(model, &format!("{pre}.w_recurrent")),
                param(model, &format!("{pre}.bias")),
                h,
                reverse,
            )
        };
        let fwd = run("fwd", false);
        let bwd = run("bwd", true);
        xs = fwd.into_iter().zip(bwd).map(|(mut f, b)| {
            f.extend(b);
            f
        }).collect();
    }
    xs.resize(l, vec![0.0; 2 * h]);
    xs
}

/// `u_t = tanh(w · h_t + b)`, softmax over the first `length` positions,
/// `s = Σ α_t h_t`. Returns `(s, α)` with `α` of length `hs.len()`.
pub fn attention_loop(hs: &[Vec<f64>], length: usize, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(length);
    for h in &hs[..length] {
        let mut acc = b;
        for (wj, hj) in w.iter().zip(h) {
            acc += wj * hj;
        }
        u.push(acc.tanh());
    }
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut alpha = vec![0.0; hs.len()];
    for t in 0..length {
        alpha[t] = e[t] / z;
    }
    let mut s = vec![0.0; w.len()];
    for t in 0..length {
        for (sj, hj) in s.iter_mut().zip(&hs[t]) {
            *sj += alpha[t] * hj;
        }
    }
    (s, alpha)
}

/// Per-class precision, recall and F1 straight from the count definitions.
pub fn report_by_hand(cm: [[u64; 2]; 2]) -> ([[f64; 3]; 2], f64, f64) {
    let total = (cm[0][0] + cm[0][1] + cm[1][0] + cm[1][1]) as f64;
    let mut per = [[0.0; 3]; 2];
    let mut weighted = 0.0;
    for c in 0..2 {
        let tp = cm[c][c] as f64;
        let support = (cm[c][0] + cm[c][1]) as f64;
        let predicted = (cm[0][c] + cm[1][c]) as f64;
        let p = tp / predicted;
        let r = tp / support;
        let f = 2.0 * p * r / (p + r);
        per[c] = [p, r, f];
        weighted += f * support / total;
    }
    let accuracy = (cm[0][0] + cm[1][1]) as f64 / total;
    (per, accuracy, weighted)
}
