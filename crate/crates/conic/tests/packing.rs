use conic::{pack_symmetric, packed_index, packed_len, unpack_symmetric, Cone, ProgramBuilder};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn arb_sym() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..7).prop_flat_map(|d| {
        proptest::collection::vec(-5.0..5.0f64, d * d).prop_map(move |v| {
            let a = DMatrix::from_row_slice(d, d, &v);
            let s = (&a + a.transpose()) * 0.5;
            (d, s.transpose().as_slice().to_vec())
        })
    })
}

#[test]
fn index_layout() {
    let d = 4;
    let mut seen = vec![false; packed_len(d)];
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            assert_eq!(packed_index(d, i, j), k);
            assert_eq!(packed_index(d, j, i), k);
            seen[k] = true;
            k += 1;
        }
    }
    assert!(seen.into_iter().all(|s| s));
}

proptest! {
    #[test]
    fn pack_round_trip((d, full) in arb_sym()) {
        let packed = pack_symmetric(d, &full);
        prop_assert_eq!(packed.len(), packed_len(d));
        let back = unpack_symmetric(d, &packed);
        for (a, b) in back.iter().zip(&full) {
            prop_assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn packed_dot_is_trace_inner_product((d, a) in arb_sym(), seed in any::<u64>()) {
        // second matrix from a cheap deterministic perturbation of the first
        let b: Vec<f64> = (0..d * d)
            .map(|k| {
                let (i, j) = (k / d, k % d);
                let h = seed.wrapping_mul(31).wrapping_add((i.min(j) * 7 + i.max(j)) as u64);
                (h % 1000) as f64 / 250.0 - 2.0
            })
            .collect();
        let pa = pack_symmetric(d, &a);
        let pb = pack_symmetric(d, &b);
        let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
        let trace: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert!((dot - trace).abs() <= 1e-12 * (1.0 + trace.abs()));
    }

    #[test]
    fn psd_entry_recovers_matrix((d, full) in arb_sym()) {
        let mut b = ProgramBuilder::new();
        b.add_var_block(Cone::Free(2));
        let h = b.add_var_block(Cone::Psd(d));
        let packed = pack_symmetric(d, &full);
        let mut z = vec![0.0; 2];
        z.extend(&packed);
        for i in 0..d {
            for j in 0..d {
                let (idx, m) = h.psd_entry(i, j);
                prop_assert!((m * z[idx] - full[i * d + j]).abs() <= 1e-14 * (1.0 + full[i * d + j].abs()));
            }
        }
    }
}
