use aesust_core::aessa::{AesSaNet, Level};
use aesust_core::archive::{load_archive, save_archive, ArchiveEntry, TensorData};
use aesust_core::backbone::FeaturePyramid;
use aesust_core::losses;
use aesust_core::suite::rows_stochastic;
use aesust_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
}

fn entry() -> impl Strategy<Value = ArchiveEntry> {
    let dims = prop::collection::vec(0usize..5, 0..4);
    (any::<bool>(), dims, "[a-zA-Z0-9_.é語]{1,16}").prop_flat_map(|(f32s, dims, name)| {
        let n: usize = dims.iter().product();
        let data = if f32s {
            prop::collection::vec(any::<u32>(), n).prop_map(|b| TensorData::F32(b.into_iter().map(f32::from_bits).collect())).boxed()
        } else {
            prop::collection::vec(any::<u64>(), n).prop_map(|b| TensorData::F64(b.into_iter().map(f64::from_bits).collect())).boxed()
        };
        data.prop_map(move |data| ArchiveEntry {
            name: name.clone(),
            dims: dims.clone(),
            data,
        })
    })
}

fn bits(e: &ArchiveEntry) -> (String, Vec<usize>, Vec<u64>) {
    let b = match &e.data {
        TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64 | 1 << 40).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
    };
    (e.name.clone(), e.dims.clone(), b)
}

/// Permutes the spatial positions of a `1×C×H×W` tensor.
fn permute_positions(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (_, c, h, w) = t.dims4();
    let hw = h * w;
    Tensor::from_fn(&[1, c, h, w], |i| t.data()[(i / hw) * hw + perm[i % hw]])
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn archive_round_trip_is_bit_exact(entries in prop::collection::vec(entry(), 0..5)) {
        let mut entries = entries;
        let mut seen = std::collections::HashSet::new();
        entries.retain(|e| seen.insert(e.name.clone()));
        let bytes = save_archive(&entries).unwrap();
        let back = load_archive(&bytes).unwrap();
        prop_assert_eq!(entries.iter().map(bits).collect::<Vec<_>>(), back.iter().map(bits).collect::<Vec<_>>());
        prop_assert_eq!(save_archive(&back).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(
        c in 1usize..6,
        ca in 1usize..6,
        (hc, wc, hs, ws) in (1usize..5, 1usize..5, 1usize..5, 1usize..5),
        seed in any::<u64>(),
        scale in 0.01f64..20.0,
    ) {
        let net = AesSaNet::<f64>::with_channels(c, ca, seed);
        let mk = |ch: usize, h: usize, w: usize, k: usize| {
            Tensor::from_fn(&[1, ch, h, w], |i| scale * ((i * 7919 + k * 104729 + seed as usize % 1000) as f64 * 0.37).sin())
        };
        let (_, a_a, a_s) = net
            .forward_with_attention(Level::R41, &mk(c, hc, wc, 1), &mk(c, hs, ws, 2), &mk(ca, hs, ws, 3))
            .unwrap();
        prop_assert!(rows_stochastic(&a_a, 1e-5).is_ok());
        prop_assert!(rows_stochastic(&a_s, 1e-5).is_ok());
        prop_assert_eq!(a_a.shape(), &[1, c, c]);
        prop_assert_eq!(a_s.shape(), &[1, hc * wc, hs * ws]);
    }

    #[test]
    fn style_positions_are_exchangeable(
        (fc, fs, fa, perm) in (tensor(vec![1, 3, 2, 3]), tensor(vec![1, 3, 2, 2]), tensor(vec![1, 2, 2, 2]), permutation(4)),
    ) {
        // Permuting style and aesthetic positions together leaves F_cs unchanged.
        let net = AesSaNet::<f64>::with_channels(3, 2, 9);
        let a = net.forward(Level::R51, &fc, &fs, &fa).unwrap();
        let b = net.forward(Level::R51, &fc, &permute_positions(&fs, &perm), &permute_positions(&fa, &perm)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn style_and_ar2_ignore_spatial_order(
        (a, b, perm) in (tensor(vec![1, 4, 3, 3]), tensor(vec![1, 4, 3, 3]), permutation(9)),
    ) {
        let base = losses::ar2_loss_tensors(&a, &b).unwrap();
        let moved = losses::ar2_loss_tensors(&permute_positions(&a, &perm), &b).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
        let pa = FeaturePyramid { taps: std::array::from_fn(|_| a.clone()) };
        let pb = FeaturePyramid { taps: std::array::from_fn(|_| b.clone()) };
        let mut pp = pa.clone();
        pp.taps[2] = permute_positions(&a, &perm);
        let s0 = losses::style_loss_tensors(&pa, &pb).unwrap();
        let s1 = losses::style_loss_tensors(&pp, &pb).unwrap();
        prop_assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn content_ignores_channel_affine_maps(
        (a, b) in (tensor(vec![1, 3, 4, 4]), tensor(vec![1, 3, 4, 4])),
        gains in prop::collection::vec(0.5f64..4.0, 3),
        shifts in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let scaled = Tensor::from_fn(&[1, 3, 4, 4], |i| a.data()[i] * gains[i / 16] + shifts[i / 16]);
        let pa = FeaturePyramid { taps: std::array::from_fn(|_| a.clone()) };
        let ps = FeaturePyramid { taps: std::array::from_fn(|_| scaled.clone()) };
        let pb = FeaturePyramid { taps: std::array::from_fn(|_| b.clone()) };
        let l0 = losses::content_loss_tensors(&pa, &pb).unwrap();
        let l1 = losses::content_loss_tensors(&ps, &pb).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-4 * l0.max(1.0));
    }

    #[test]
    fn losses_are_nonnegative(
        (a, b, c, d) in (tensor(vec![2, 3, 4, 4]), tensor(vec![2, 3, 4, 4]), tensor(vec![2, 3, 4, 4]), tensor(vec![2, 3, 4, 4])),
    ) {
        prop_assert!(losses::identity_loss_tensors(&a, &b, &c, &d).unwrap() >= 0.0);
        prop_assert!(losses::ar1_loss_tensors(&a, &b).unwrap() >= 0.0);
        prop_assert!(losses::ar2_loss_tensors(&c, &d).unwrap() >= 0.0);
    }
}
