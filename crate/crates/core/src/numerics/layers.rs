use crate::error::Result;

use super::{Scalar, Tape, Var};

/// Gated MLP: `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`.
pub fn swiglu<T: Scalar>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}
