//! Recurrent and affine building blocks composed from tape operations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// GRU weights recorded on a tape. Gate columns are ordered `[z | r | h̃]`.
///
/// * `w_input`: `C×3H`
/// * `w_gates`: `H×2H`, recurrent weights for `z` and `r`
/// * `w_candidate`: `H×H`, recurrent weights for the candidate
/// * `bias`: `3H`
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_input: Var,
    pub w_gates: Var,
    pub w_candidate: Var,
    pub bias: Var,
}

/// Runs a GRU over the rows of `inputs` (`T×C`) and returns all hidden
/// states (`T×H`).
///
/// ```text
/// z = σ(x Wz + h Uz + bz)
/// r = σ(x Wr + h Ur + br)
/// h̃ = tanh(x Wh + (r∘h) Uh + bh)
/// h' = (1 − z)∘h + z∘h̃
/// ```
///
/// `h0` defaults to zeros.
pub fn gru_forward(tape: &mut Tape, inputs: Var, gru: &GruVars, h0: Option<Var>) -> Result<Var> {
    let (steps, _) = tape.value(inputs).dims2()?;
    if steps == 0 {
        return Err(Error::EmptyInput("gru input has no steps"));
    }
    let (hidden, gates2) = tape.value(gru.w_gates).dims2()?;
    if gates2 != 2 * hidden || tape.value(gru.w_candidate).dims2()? != (hidden, hidden) {
        return Err(Error::shape("inconsistent GRU recurrent weights"));
    }
    let projected = tape.matmul(inputs, gru.w_input)?;
    let projected = tape.add_row(projected, gru.bias)?;
    if tape.value(projected).dims2()?.1 != 3 * hidden {
        return Err(Error::shape("GRU input projection must have 3H columns"));
    }

    let mut h = match h0 {
        Some(h) => {
            if tape.value(h).numel() != hidden {
                return Err(Error::shape("GRU initial state width"));
            }
            h
        }
        None => tape.constant(crate::Tensor::zeros(&[1, hidden])),
    };
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.row(projected, t)?;
        let x_zr = tape.slice_cols(x, 0, 2 * hidden)?;
        let x_h = tape.slice_cols(x, 2 * hidden, 3 * hidden)?;
        let h_zr = tape.matmul(h, gru.w_gates)?;
        let zr = tape.add(x_zr, h_zr)?;
        let zr = tape.sigmoid(zr)?;
        let z = tape.slice_cols(zr, 0, hidden)?;
        let r = tape.slice_cols(zr, hidden, 2 * hidden)?;
        let rh = tape.mul(r, h)?;
        let rh_u = tape.matmul(rh, gru.w_candidate)?;
        let cand = tape.add(x_h, rh_u)?;
        let cand = tape.tanh(cand)?;
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states.push(h);
    }
    tape.stack_rows(&states)
}

/// `x · w + b` for `x: T×C`, `w: C×D`, `b: D`.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, sigmoid};
    use crate::Tensor;

    fn gru_leaves(tape: &mut Tape, c: usize, h: usize, fill: impl Fn(usize) -> f64) -> GruVars {
        let mut k = 0;
        let mut next = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| {
                k += 1;
                fill(k)
            });
            Tensor::new(shape, data.collect()).unwrap()
        };
        let (a, b, c2, d) = (next(&[c, 3 * h]), next(&[h, 2 * h]), next(&[h, h]), next(&[3 * h]));
        GruVars {
            w_input: tape.param(a),
            w_gates: tape.param(b),
            w_candidate: tape.param(c2),
            bias: tape.param(d),
        }
    }

    #[test]
    fn zero_params_give_zero_states() {
        let mut tape = Tape::new();
        let gru = gru_leaves(&mut tape, 2, 4, |_| 0.0);
        let x = tape.constant(Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap());
        let out = gru_forward(&mut tape, x, &gru, None).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_recurrence_matches_oracle() {
        // C = H = 1, weights: wz, wr, wh | uz, ur | uh | bz, br, bh
        let (wz, wr, wh, uz, ur, uh, bz, br, bh) = (0.5, -0.3, 0.8, 0.2, 0.4, -0.6, 0.1, 0.05, -0.2);
        let xs = [0.7, -1.1, 0.3];
        let mut tape = Tape::new();
        let gru = GruVars {
            w_input: tape.param(Tensor::new(&[1, 3], vec![wz, wr, wh]).unwrap()),
            w_gates: tape.param(Tensor::new(&[1, 2], vec![uz, ur]).unwrap()),
            w_candidate: tape.param(Tensor::new(&[1, 1], vec![uh]).unwrap()),
            bias: tape.param(Tensor::new(&[3], vec![bz, br, bh]).unwrap()),
        };
        let x = tape.constant(Tensor::new(&[3, 1], xs.to_vec()).unwrap());
        let out = gru_forward(&mut tape, x, &gru, None).unwrap();

        let mut h: f64 = 0.0;
        for (t, &x) in xs.iter().enumerate() {
            let z = sigmoid(wz * x + uz * h + bz);
            let r = sigmoid(wr * x + ur * h + br);
            let c = (wh * x + uh * r * h + bh).tanh();
            h = (1.0 - z) * h + z * c;
            assert!((tape.value(out).data()[t] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let mut tape = Tape::new();
        let gru = gru_leaves(&mut tape, 2, 3, |_| 0.1);
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            gru_forward(&mut tape, x, &gru, None),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn gradient_through_time() {
        let (c, h) = (2, 3);
        let n = |k: usize| ((k as f64) * 0.7).sin() * 0.5;
        let params: Vec<Tensor> = [vec![4, c], vec![c, 3 * h], vec![h, 2 * h], vec![h, h], vec![3 * h]]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let len: usize = s.iter().product();
                Tensor::new(s, (0..len).map(|k| n(k + 17 * i)).collect()).unwrap()
            })
            .collect();
        let f = |tape: &mut Tape, v: &[Var]| {
            let gru = GruVars {
                w_input: v[1],
                w_gates: v[2],
                w_candidate: v[3],
                bias: v[4],
            };
            let out = gru_forward(tape, v[0], &gru, None)?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        };
        assert!(finite_diff_check(f, &params, 1e-5).unwrap() <= 1e-4);
    }
}
