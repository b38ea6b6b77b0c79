use duotts::numerics::{check_gradients, GradInput, GradProbe, Graph, NodeId, Scalar, Tensor};
use duotts::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Prim {
    MatMul,
    AddMul,
    Bias,
    LayerNorm,
    Gelu,
    Embedding,
    Conv1dStride2,
    CausalAttention,
    ConcatCols,
    Softmax,
    CrossEntropy,
    Mse,
    TransposeReshape,
}

const ALL: [Prim; 13] = [
    Prim::MatMul,
    Prim::AddMul,
    Prim::Bias,
    Prim::LayerNorm,
    Prim::Gelu,
    Prim::Embedding,
    Prim::Conv1dStride2,
    Prim::CausalAttention,
    Prim::ConcatCols,
    Prim::Softmax,
    Prim::CrossEntropy,
    Prim::Mse,
    Prim::TransposeReshape,
];

struct Probe {
    prim: Prim,
    phase: f64,
}

impl Probe {
    /// Contracts the output with a fixed random tensor so every coordinate matters.
    fn read<S: Scalar>(&self, g: &mut Graph<S>, out: NodeId) -> Result<NodeId> {
        let shape = g.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| S::lit((i as f64 * 1.7 + self.phase).sin())).collect();
        let w = g.constant(Tensor::new(shape, data)?);
        let p = g.mul(out, w)?;
        g.sum(p)
    }
}

impl GradProbe for Probe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[NodeId]) -> Result<NodeId> {
        let out = match self.prim {
            Prim::MatMul => g.matmul(x[0], x[1])?,
            Prim::AddMul => {
                let s = g.add(x[0], x[1])?;
                g.mul(s, x[0])?
            }
            Prim::Bias => g.add_bias(x[0], x[1])?,
            Prim::LayerNorm => g.layer_norm(x[0], x[1], x[2])?,
            Prim::Gelu => g.gelu(x[0])?,
            Prim::Embedding => g.embedding(x[0], &[2, 0, 2, 1])?,
            Prim::Conv1dStride2 => g.conv1d(x[0], x[1], x[2], 3, 2)?,
            Prim::CausalAttention => g.attention(x[0], x[1], x[2], 2, true)?,
            Prim::ConcatCols => {
                let c = g.concat_cols(&[x[0], x[1]])?;
                g.gelu(c)?
            }
            Prim::Softmax => g.softmax(x[0], 1)?,
            Prim::CrossEntropy => return g.cross_entropy(x[0], &[1, 9, 3], 9),
            Prim::Mse => return g.mse(x[0], x[1]),
            Prim::TransposeReshape => {
                let t = g.transpose(x[0])?;
                g.reshape(t, vec![2, 6])?
            }
        };
        self.read(g, out)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn inputs_for(prim: Prim, rng: &mut ChaCha8Rng) -> Vec<GradInput> {
    let shapes: Vec<Vec<usize>> = match prim {
        Prim::MatMul => vec![vec![3, 4], vec![4, 5]],
        Prim::AddMul => vec![vec![3, 4], vec![3, 4]],
        Prim::Bias => vec![vec![3, 4], vec![4]],
        Prim::LayerNorm => vec![vec![3, 6], vec![6], vec![6]],
        Prim::Gelu => vec![vec![4, 5]],
        Prim::Embedding => vec![vec![3, 4]],
        Prim::Conv1dStride2 => vec![vec![7, 3], vec![9, 4], vec![4]],
        Prim::CausalAttention => vec![vec![5, 4], vec![5, 4], vec![5, 4]],
        Prim::ConcatCols => vec![vec![3, 2], vec![3, 3]],
        Prim::Softmax => vec![vec![3, 5]],
        Prim::CrossEntropy => vec![vec![3, 5]],
        Prim::Mse => vec![vec![4, 3], vec![4, 3]],
        Prim::TransposeReshape => vec![vec![4, 3]],
    };
    shapes
        .iter()
        .map(|s| {
            let mut t = rand_t(rng, s);
            if matches!(prim, Prim::CausalAttention) {
                t = t.map(|v| 2.0 * v);
            }
            GradInput::new(t)
        })
        .collect()
}

#[test]
fn every_primitive_matches_finite_differences_on_five_seeds() {
    for prim in ALL {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + prim as u64);
            let inputs = inputs_for(prim, &mut rng);
            let probe = Probe {
                prim,
                phase: seed as f64,
            };
            let r = check_gradients(&probe, &inputs).unwrap();
            assert!(r.checked > 0);
            assert!(
                r.max_rel_error < 1e-3,
                "{prim:?} seed {seed}: rel error {} at {:?}",
                r.max_rel_error,
                r.worst
            );
        }
    }
}

#[test]
fn frozen_inputs_are_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 5]);
    let probe = Probe {
        prim: Prim::MatMul,
        phase: 0.5,
    };
    let r = check_gradients(&probe, &[GradInput::new(a), GradInput::frozen(b)]).unwrap();
    assert_eq!(r.checked, 12);
}

#[test]
fn backward_of_sum_is_ones_and_of_square_is_twice_input() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap(), true);
    let s = g.sum(x).unwrap();
    let b = g.backward(s).unwrap();
    assert!(b.input(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f32>::new();
    let vals = vec![1.0, -2.0, 0.5, 3.0];
    let x = g.input(Tensor::vector(vals.clone()), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let b = g.backward(s).unwrap();
    let gx = b.input(x).unwrap().data().to_vec();
    assert_eq!(gx, vals.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(duotts::Error::Argument(_))));
}

/// matmul → layernorm → softmax → cross-entropy in one graph.
struct Composite;

impl GradProbe for Composite {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[NodeId]) -> Result<NodeId> {
        let h = g.matmul(x[0], x[1])?;
        let n = g.layer_norm(h, x[2], x[3])?;
        let p = g.softmax(n, 1)?;
        let p = g.scale(p, S::lit(4.0))?;
        g.cross_entropy(p, &[0, 3, 5, 2], 5)
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            GradInput::new(rand_t(&mut rng, &[4, 3])),
            GradInput::new(rand_t(&mut rng, &[3, 6])),
            GradInput::new(rand_t(&mut rng, &[6]).map(|v| 1.0 + 0.3 * v)),
            GradInput::new(rand_t(&mut rng, &[6])),
        ];
        let r = check_gradients(&Composite, &inputs).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {}", r.max_rel_error);
    }
}
