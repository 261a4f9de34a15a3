//! Random-graph gradient checks against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Elementwise, Tape, Tensor, Var};

#[derive(Clone, Debug)]
enum Step {
    Unary(Elementwise),
    BinaryWithLeaf(Elementwise, usize),
    Matmul(usize),
}

/// A random graph: a chain of ops over a set of input leaves.
struct Graph {
    inputs: Vec<Tensor>,
    steps: Vec<Step>,
}

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut inputs = vec![rand_tensor(rng, r, c, 1.0)];
    let mut steps = Vec::new();
    let mut cols = c;
    for _ in 0..rng.random_range(2..7) {
        match rng.random_range(0..3) {
            0 => {
                let op = [
                    Elementwise::Tanh,
                    Elementwise::Sigmoid,
                    Elementwise::Softplus,
                    Elementwise::Exp,
                    Elementwise::Square,
                ][rng.random_range(0..5)];
                steps.push(Step::Unary(op));
            }
            1 => {
                let op = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul][rng.random_range(0..3)];
                inputs.push(rand_tensor(rng, r, cols, 1.0));
                steps.push(Step::BinaryWithLeaf(op, inputs.len() - 1));
            }
            _ => {
                let s = rng.random_range(1..4);
                inputs.push(rand_tensor(rng, cols, s, 0.7));
                steps.push(Step::Matmul(inputs.len() - 1));
                cols = s;
            }
        }
    }
    Graph { inputs, steps }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn eval(g: &Graph, tape: &mut Tape, inputs: &[Tensor]) -> (Var, Vec<Var>) {
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let mut h = leaves[0];
    for s in &g.steps {
        h = match s {
            Step::Unary(op) => tape.elementwise(*op, &[h]).unwrap(),
            Step::BinaryWithLeaf(op, i) => tape.elementwise(*op, &[h, leaves[*i]]).unwrap(),
            Step::Matmul(i) => tape.matmul(h, leaves[*i]).unwrap(),
        };
        // keep magnitudes tame so exp/square chains stay well conditioned
        h = tape.tanh(h);
    }
    let sq = tape.square(h);
    (tape.mean(sq), leaves)
}

pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn random_graphs_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let mut tape = Tape::new();
        let (loss, leaves) = eval(&g, &mut tape, &g.inputs);
        let grads = tape.backward(loss).unwrap();
        for (li, t) in g.inputs.iter().enumerate() {
            let ad = grads.get_or_zero(leaves[li], t.len());
            #[allow(clippy::needless_range_loop)]
            for k in 0..t.len() {
                let mut plus = g.inputs.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = g.inputs.clone();
                minus[li].data_mut()[k] -= h;
                let mut tp = Tape::new();
                let (lp, _) = eval(&g, &mut tp, &plus);
                let fp = tp.value(lp).item();
                let mut tm = Tape::new();
                let (lm, _) = eval(&g, &mut tm, &minus);
                let fm = tm.value(lm).item();
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max(rel_err(ad[k], fd));
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(&mut rng);
    let run = || {
        let mut tape = Tape::new();
        let (loss, leaves) = eval(&g, &mut tape, &g.inputs);
        let v = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let flat: Vec<u64> =
            leaves.iter().zip(&g.inputs).flat_map(|(&l, t)| grads.get_or_zero(l, t.len())).map(f64::to_bits).collect();
        (v.to_bits(), flat)
    };
    assert_eq!(run(), run());
}

#[test]
fn second_forward_starts_from_empty_tape() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(2.0));
    let y = tape.square(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.len(), 0);
    let x = tape.param(&Tensor::scalar(2.0));
    assert_eq!(x.index(), 0);
}
