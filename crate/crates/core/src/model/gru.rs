//! GRU cells on the tape.

use rand::Rng;

use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// One GRU cell: update gate z, reset gate r, candidate h̃.
///
/// h' = (1-z)⊙h + z⊙h̃,  z = σ(W_z x + U_z h + b_z),
/// r = σ(W_r x + U_r h + b_r),  h̃ = tanh(W_h x + U_h (r⊙h) + b_h)
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w = |ps: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut R| {
            ps.register(format!("{prefix}.{name}"), Tensor::uniform(r, c, 1.0 / (c as f64).sqrt(), rng))
        };
        let b = |ps: &mut ParamSet, name: &str, n: usize| {
            ps.register(format!("{prefix}.{name}"), Tensor::zeros(n, 1))
        };
        GruParams {
            w_z: w(ps, "w_z", hidden, input, rng),
            u_z: w(ps, "u_z", hidden, hidden, rng),
            b_z: b(ps, "b_z", hidden),
            w_r: w(ps, "w_r", hidden, input, rng),
            u_r: w(ps, "u_r", hidden, hidden, rng),
            b_r: b(ps, "b_r", hidden),
            w_h: w(ps, "w_h", hidden, input, rng),
            u_h: w(ps, "u_h", hidden, hidden, rng),
            b_h: b(ps, "b_h", hidden),
        }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> NodeId {
        let zx = tape.affine(self.w_z, self.b_z, x);
        let uzh = {
            let u = tape.leaf(self.u_z);
            tape.matvec(u, h)
        };
        let z_in = tape.add(zx, uzh);
        let z = tape.sigmoid(z_in);

        let rx = tape.affine(self.w_r, self.b_r, x);
        let urh = {
            let u = tape.leaf(self.u_r);
            tape.matvec(u, h)
        };
        let r_in = tape.add(rx, urh);
        let r = tape.sigmoid(r_in);

        let hx = tape.affine(self.w_h, self.b_h, x);
        let rh = tape.mul(r, h);
        let uhrh = {
            let u = tape.leaf(self.u_h);
            tape.matvec(u, rh)
        };
        let cand_in = tape.add(hx, uhrh);
        let cand = tape.tanh(cand_in);

        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h);
        let new = tape.mul(z, cand);
        tape.add(kept, new)
    }

    /// Run over a sequence from a zero initial hidden; returns all hiddens.
    pub fn run(&self, tape: &mut Tape, xs: &[NodeId], hidden: usize) -> Vec<NodeId> {
        let mut h = tape.constant(Tensor::zeros(hidden, 1));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(tape, x, h);
            out.push(h);
        }
        out
    }
}

/// Bidirectional pass with one weight-shared cell (the same GRU function is
/// applied in both directions). `forward[j]` consumes `xs[..=j]`,
/// `backward[j]` consumes `xs[j..]`; `concat[j] = [forward[j], backward[j]]`.
pub fn bidirectional(tape: &mut Tape, cell: &GruParams, xs: &[NodeId], hidden: usize) -> BiOutput {
    let f = cell.run(tape, xs, hidden);
    let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
    let mut b = cell.run(tape, &rev, hidden);
    b.reverse();
    let cat: Vec<NodeId> = f.iter().zip(b.iter()).map(|(&x, &y)| tape.concat(x, y)).collect();
    BiOutput { forward: f, backward: b, concat: cat }
}

pub struct BiOutput {
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
    pub concat: Vec<NodeId>,
}

impl BiOutput {
    /// [→h_last, ←h_first]: the final state of the bidirectional pass.
    pub fn final_state(&self, tape: &mut Tape) -> NodeId {
        let f = *self.forward.last().expect("non-empty sequence");
        let b = self.backward[0];
        tape.concat(f, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_fix_zero_state() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruParams::register(&mut ps, "g", 3, 2, &mut rng);
        for id in 0..ps.len() {
            ps.get_mut(crate::tape::ParamId(id)).fill(0.0);
        }
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let hs = cell.run(&mut tape, &[x, x, x], 2);
        for h in hs {
            assert_eq!(tape.value(h).as_slice(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = GruParams::register(&mut ps, "g", 3, 2, &mut rng);
        let x1 = Tensor::vector(vec![0.3, -0.7, 0.2]);
        let x2 = Tensor::vector(vec![-0.1, 0.4, 0.9]);
        let build = move |_: &ParamSet, tape: &mut Tape| {
            let a = tape.constant(x1.clone());
            let b = tape.constant(x2.clone());
            let hs = cell.run(tape, &[a, b], 2);
            let last = *hs.last().unwrap();
            let sq = tape.mul(last, last);
            tape.sum(sq)
        };
        let rep = gradient_check(&mut ps, 1e-5, &build);
        assert!(rep.max_rel_err < 1e-6, "{} at {}", rep.max_rel_err, rep.worst_param);
    }

    #[test]
    fn bidirectional_reversal_swaps_halves() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cell = GruParams::register(&mut ps, "c", 2, 3, &mut rng);
        let xs_data = [
            Tensor::vector(vec![0.1, 0.2]),
            Tensor::vector(vec![-0.4, 0.5]),
            Tensor::vector(vec![0.7, -0.6]),
        ];

        let mut tape = Tape::new(&ps);
        let xs: Vec<NodeId> = xs_data.iter().map(|t| tape.constant(t.clone())).collect();
        let out = bidirectional(&mut tape, &cell, &xs, 3);
        let rev_in: Vec<NodeId> = xs.iter().rev().copied().collect();
        let out_rev = bidirectional(&mut tape, &cell, &rev_in, 3);

        let n = xs.len();
        for j in 0..n {
            let fw = tape.value(out.forward[j]).as_slice().to_vec();
            let bw = tape.value(out.backward[j]).as_slice().to_vec();
            let fw_rev = tape.value(out_rev.forward[n - 1 - j]).as_slice().to_vec();
            let bw_rev = tape.value(out_rev.backward[n - 1 - j]).as_slice().to_vec();
            for (a, b) in fw.iter().zip(bw_rev.iter()) {
                assert!((a - b).abs() < 1e-12, "forward half must mirror reversed backward half");
            }
            for (a, b) in bw.iter().zip(fw_rev.iter()) {
                assert!((a - b).abs() < 1e-12, "backward half must mirror reversed forward half");
            }
        }
    }
}
