//! Builds a tiny conv -> group norm -> sigmoid -> linear graph, runs the
//! backward pass and compares a few weight gradients with central
//! differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalpel_seg::autodiff::{AutodiffError, Graph, Tensor};

struct Inputs {
    x: Tensor,
    w: Tensor,
    gamma: Tensor,
    beta: Tensor,
    head: Tensor,
}

fn loss(inp: &Inputs, record_grad: bool) -> Result<(Graph, f32, Vec<f32>), AutodiffError> {
    let mut g = Graph::new();
    let x = g.constant(inp.x.clone());
    let w = g.leaf(inp.w.clone().with_requires_grad(record_grad));
    let gamma = g.constant(inp.gamma.clone());
    let beta = g.constant(inp.beta.clone());
    let head = g.constant(inp.head.clone());
    let c = g.conv2d(x, w, None, 1, 1)?;
    let n = g.group_norm(c, gamma, beta, 2, 1e-5)?;
    let r = g.sigmoid(n)?;
    let flat = g.reshape(r, [1, 4 * 6 * 6])?;
    let y = g.linear(flat, head, None)?;
    let l = g.sum(y)?;
    let value = g.value(l).item();
    if record_grad {
        g.backward(l)?;
    }
    let grad = g.grad(w).map(<[f32]>::to_vec).unwrap_or_default();
    Ok((g, value, grad))
}

fn main() -> Result<(), AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inp = Inputs {
        x: Tensor::randn([1, 3, 6, 6], 1.0, &mut rng),
        w: Tensor::randn([4, 3, 3, 3], 0.5, &mut rng),
        gamma: Tensor::full([4], 1.0),
        beta: Tensor::zeros([4]),
        head: Tensor::randn([2, 4 * 6 * 6], 1.0, &mut rng),
    };
    let (graph, value, analytic) = loss(&inp, true)?;
    println!("loss {value:.5} over {} tape nodes", graph.len());
    println!("{:>5} {:>12} {:>12} {:>10}", "index", "analytic", "numeric", "abs err");
    let h = 1e-2;
    for i in [0, 13, 27, 54, 80, 107] {
        let orig = inp.w.data()[i];
        inp.w.data_mut()[i] = orig + h;
        let plus = loss(&inp, false)?.1;
        inp.w.data_mut()[i] = orig - h;
        let minus = loss(&inp, false)?.1;
        inp.w.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        println!("{i:>5} {:>12.6} {numeric:>12.6} {:>10.2e}", analytic[i], (analytic[i] - numeric).abs());
    }
    Ok(())
}
