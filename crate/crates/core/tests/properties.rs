use nanolens::layers::Cache;
use nanolens::loss::softmax;
use nanolens::train::split_indices;
use nanolens::{Activation, Conv2d, Layer, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let len = shape.iter().product::<usize>();
    prop::collection::vec(-3.0f64..3.0, len).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn even_shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_map(|(n, c, h, w)| [n, c, 2 * h, 2 * w])
}

fn any_shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_preserves_spatial_dims(
        x in any_shape().prop_flat_map(tensor),
        oc in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let [n, c, h, w] = x.shape();
        let conv = Conv2d::<f64>::zeros(c, oc, k, Activation::Linear).unwrap();
        let (y, _) = Layer::Conv2d(conv).forward(&x).unwrap();
        prop_assert_eq!(y.shape(), [n, oc, h, w]);
    }

    #[test]
    fn maxpool_halves_and_routes_gradient_conservatively(
        x in even_shape().prop_flat_map(tensor),
    ) {
        let [n, c, h, w] = x.shape();
        let (y, cache) = Layer::MaxPool2x2.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), [n, c, h / 2, w / 2]);
        let g = Tensor::from_fn(y.shape(), |[a, b, i, j]| (a + b + i + j) as f64 + 0.5);
        let back = Layer::MaxPool2x2.backward(&cache, &g).unwrap();
        // Total gradient mass is preserved and lands on one element per window.
        prop_assert!((back.grad_input.sum() - g.sum()).abs() < 1e-9);
        let nonzero = back.grad_input.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert_eq!(nonzero, g.len());
        if let Cache::MaxPool2x2 { argmax, .. } = cache {
            for (&src, &v) in argmax.iter().zip(y.data()) {
                prop_assert_eq!(x.data()[src], v);
            }
        }
    }

    #[test]
    fn upsample_doubles_and_block_mean_recovers_input(
        x in any_shape().prop_flat_map(tensor),
    ) {
        let [n, c, h, w] = x.shape();
        let (y, cache) = Layer::UpsampleNearest2x.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), [n, c, 2 * h, 2 * w]);
        let pooled = Tensor::from_fn(x.shape(), |[a, b, i, j]| {
            (y[[a, b, 2 * i, 2 * j]] + y[[a, b, 2 * i + 1, 2 * j]]
                + y[[a, b, 2 * i, 2 * j + 1]] + y[[a, b, 2 * i + 1, 2 * j + 1]]) / 4.0
        });
        for (p, v) in pooled.data().iter().zip(x.data()) {
            prop_assert!((p - v).abs() < 1e-12);
        }
        let back = Layer::UpsampleNearest2x.backward(&cache, &y).unwrap();
        for (b, v) in back.grad_input.data().iter().zip(x.data()) {
            prop_assert!((b - 4.0 * v).abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_preserves_elements(x in any_shape().prop_flat_map(tensor)) {
        let [n, c, h, w] = x.shape();
        let (y, _) = Layer::Flatten.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), [n, c * h * w, 1, 1]);
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn odd_dims_rejected_by_pool(h in 1usize..8, w in 1usize..8) {
        prop_assume!(h % 2 == 1 || w % 2 == 1);
        let x = Tensor::<f64>::zeros([1, 1, h, w]);
        prop_assert!(Layer::MaxPool2x2.forward(&x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one(
        n in 1usize..5,
        logits in prop::collection::vec(-50.0f64..50.0, 2..10),
    ) {
        let k = logits.len();
        let x = Tensor::from_fn([n, k, 1, 1], |[i, j, _, _]| logits[j] + i as f64);
        let p = softmax(&x);
        for i in 0..n {
            let s: f64 = p.item(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_and_sigmoid_ranges(v in -1e3f64..1e3) {
        prop_assert!(Activation::Relu.apply(v) >= 0.0);
        let s = Activation::Sigmoid.apply(v);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(s.is_finite());
    }

    #[test]
    fn split_is_a_partition(n in 1usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (a, b) = split_indices(n, frac, seed);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, frac, seed), (a, b));
    }

    #[test]
    fn conv_is_deterministic(x in any_shape().prop_flat_map(tensor), seed in 0u64..50) {
        let c = x.channels();
        let mut conv = Conv2d::<f64>::zeros(c, 2, 3, Activation::Relu).unwrap();
        let mut s = seed;
        for v in conv.weight.data_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
        let layer = Layer::Conv2d(conv);
        let (a, _) = layer.forward(&x).unwrap();
        let (b, _) = layer.forward(&x).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
