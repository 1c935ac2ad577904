//! Reverse-mode gradients against central finite differences.

use oraclebench_core::numcore::{Graph, NodeId, RngStream, Tensor};

#[derive(Clone, Copy, Debug)]
enum Act {
    Tanh,
    Relu,
    Softplus,
    Exp,
}

struct Spec {
    acts: [Act; 3],
    widths: [usize; 4],
    rows: usize,
    log_softmax_head: bool,
}

/// Leaves: x, then (w, b) per layer, then an affine row scale.
fn build(g: &mut Graph, spec: &Spec, leaves: &[Tensor]) -> (NodeId, Vec<NodeId>) {
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let mut h = ids[0];
    for layer in 0..3 {
        let w = ids[1 + 2 * layer];
        let b = ids[2 + 2 * layer];
        let ones = g.leaf(Tensor::full(vec![1, spec.widths[layer + 1]], 1.0).unwrap());
        let z = g.matmul(h, w).unwrap();
        let z = g.affine_broadcast(z, ones, b).unwrap();
        h = match spec.acts[layer] {
            Act::Tanh => g.tanh(z).unwrap(),
            Act::Relu => g.relu(z).unwrap(),
            Act::Softplus => g.softplus(z).unwrap(),
            Act::Exp => {
                let s = g.tanh(z).unwrap();
                g.exp(s).unwrap()
            }
        };
    }
    let zero = g.leaf(Tensor::zeros(vec![1, spec.widths[3]]));
    let scaled = g.affine_broadcast(h, ids[7], zero).unwrap();
    let root = if spec.log_softmax_head {
        let ls = g.log_softmax(scaled).unwrap();
        let sq = g.mul(ls, ls).unwrap();
        g.mean(sq).unwrap()
    } else {
        let sp = g.softplus(scaled).unwrap();
        let lg = g.log(sp).unwrap();
        let d = g.sub(lg, scaled).unwrap();
        g.sum(d).unwrap()
    };
    (root, ids)
}

fn eval(spec: &Spec, leaves: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (root, _) = build(&mut g, spec, leaves);
    g.value(root).item()
}

fn random_tensor(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        rng.normal_vec(rows * cols).into_iter().map(|v| v * scale).collect(),
    )
    .unwrap()
}

#[test]
fn random_graphs_match_finite_differences() {
    let acts = [Act::Tanh, Act::Relu, Act::Softplus, Act::Exp];
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = RngStream::new(2024, trial);
        let widths = [1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(4)];
        let spec = Spec {
            acts: [acts[rng.below(4)], acts[rng.below(4)], acts[rng.below(4)]],
            widths,
            rows: 1 + rng.below(4),
            log_softmax_head: rng.below(2) == 0,
        };
        let mut leaves = vec![random_tensor(&mut rng, spec.rows, widths[0], 1.0)];
        for l in 0..3 {
            leaves.push(random_tensor(&mut rng, widths[l], widths[l + 1], 0.8));
            leaves.push(random_tensor(&mut rng, 1, widths[l + 1], 0.3));
        }
        leaves.push(random_tensor(&mut rng, 1, widths[3], 1.0));

        let mut g = Graph::new();
        let (root, ids) = build(&mut g, &spec, &leaves);
        let adj = g.backward(root).unwrap();

        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = adj.get_or_zeros(ids[li], leaf);
            assert_eq!(analytic.shape(), leaf.shape());
            for j in 0..leaf.numel() {
                let mut plus = leaves.clone();
                let mut d = plus[li].data().to_vec();
                d[j] += h;
                plus[li].assign(&d).unwrap();
                let mut minus = leaves.clone();
                let mut d = minus[li].data().to_vec();
                d[j] -= h;
                minus[li].assign(&d).unwrap();
                let fd = (eval(&spec, &plus) - eval(&spec, &minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "trial {trial} leaf {li}[{j}]: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }
    println!("worst relative gradient error over 100 graphs: {worst:.3e}");
}
