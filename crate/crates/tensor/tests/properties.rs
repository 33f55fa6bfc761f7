use proptest::prelude::*;
use tracediff_tensor::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_of_a_sum_is_ones(x in matrix(3, 4)) {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(v).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn reused_variable_accumulates_gradient(x in matrix(2, 3)) {
        // d/dx sum(x * x + x) = 2x + 1
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let y = tape.add(sq, v).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|a| 2.0 * a + 1.0).collect();
        prop_assert!(close(tape.grad(v).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn matmul_transpose_identity(a in matrix(3, 4), b in matrix(4, 2)) {
        // (AB)^T = B^T A^T
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let ab = tape.matmul(va, vb).unwrap();
        let left = tape.transpose(ab).unwrap();
        let (bt, at) = (tape.transpose(vb).unwrap(), tape.transpose(va).unwrap());
        let right = tape.matmul(bt, at).unwrap();
        prop_assert!(close(tape.value(left).data(), tape.value(right).data(), 1e-12));
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(4, 3), c in -50.0f64..50.0) {
        let shifted = Tensor::new(vec![4, 3], x.data().iter().map(|v| v + c).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (sa, sb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
        prop_assert!(close(tape.value(sa).data(), tape.value(sb).data(), 1e-12));
    }

    #[test]
    fn concat_then_slice_recovers_parts(a in matrix(2, 3), b in matrix(2, 4)) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.concat(&[va, vb], 1).unwrap();
        let left = tape.slice(c, 1, 0, 3).unwrap();
        let right = tape.slice(c, 1, 3, 7).unwrap();
        prop_assert_eq!(tape.value(left), &a);
        prop_assert_eq!(tape.value(right), &b);
    }

    #[test]
    fn upsample_then_pool_is_identity(x in matrix(3, 5)) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let up = tape.upsample1d(v).unwrap();
        let down = tape.maxpool1d(up).unwrap();
        prop_assert_eq!(tape.value(down), &x);
    }

    #[test]
    fn tape_nodes_only_reference_earlier_nodes(x in matrix(2, 2)) {
        let mut tape = Tape::new();
        let v = tape.param(x);
        let a = tape.silu(v);
        let b = tape.mul(a, v).unwrap();
        let s = tape.mean(b);
        prop_assert!(v.index() < a.index() && a.index() < b.index() && b.index() < s.index());
        prop_assert_eq!(tape.len(), 4);
    }
}
