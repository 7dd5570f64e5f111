use ndtensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use proptest::prelude::*;

fn mlp_forward(tape: &mut Tape, x: &Tensor, w: &Tensor, slope: f64) -> (Var, Var) {
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let a = tape.constant(Tensor::scalar(slope));
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.prelu(h, a).unwrap();
    let s = tape.sigmoid(h);
    let t = tape.tanh(s);
    (xv, tape.mean(t))
}

proptest! {
    #[test]
    fn tracked_and_untracked_forward_agree_bitwise(
        x in prop::collection::vec(-3.0f64..3.0, 6),
        w in prop::collection::vec(-3.0f64..3.0, 6),
        slope in 0.0f64..1.0,
    ) {
        let x = Tensor::matrix(2, 3, x).unwrap();
        let w = Tensor::matrix(3, 2, w).unwrap();
        let mut tracked = Tape::new();
        let (_, a) = mlp_forward(&mut tracked, &x, &w, slope);
        let mut plain = Tape::no_grad();
        let (_, b) = mlp_forward(&mut plain, &x, &w, slope);
        prop_assert_eq!(tracked.value(a).item().to_bits(), plain.value(b).item().to_bits());
        prop_assert!(!plain.is_tracked(b));
    }

    #[test]
    fn adam_with_zero_lr_is_inert(
        p in prop::collection::vec(-10.0f64..10.0, 1..8),
        g in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let mut params = p.clone();
        let mut state = AdamState::new(p.len(), AdamConfig::with_lr(0.0));
        for _ in 0..3 {
            state.step(&mut params, &g[..p.len()]).unwrap();
        }
        prop_assert_eq!(params, p);
        prop_assert!(state.second_moment().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn tape_nodes_only_reference_earlier_nodes(
        x in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut tape = Tape::new();
        let w = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let (_, root) = mlp_forward(&mut tape, &Tensor::matrix(2, 3, x).unwrap(), &w, 0.25);
        for v in tape.vars() {
            prop_assert!(tape.inputs(v).iter().all(|i| i.index() < v.index()));
        }
        let n = tape.len();
        prop_assert_eq!(n, root.index() + 1);
    }
}
