mod common;

use proptest::prelude::*;
use rope_core::npe::{read_checkpoint, write_checkpoint, FlowModel, FlowSpec};
use rope_core::ot::{sinkhorn, CostMatrix, Coupling};
use rope_core::{LabeledDataset, Provenance, SplitRole, TaskId, Tensor};

#[test]
fn inverse_undoes_forward() {
    let err = common::flow_roundtrip_error(2000);
    assert!(err < 1e-8, "round-trip error {err:e}");
}

#[test]
fn density_integrates_to_one() {
    let (z, se) = common::mc_normalization(100_000);
    assert!((z - 1.0).abs() < 3.0 * se, "{z} ± {se}");
    assert!(se < 0.05, "standard error {se} too loose to be informative");
}

#[test]
fn samples_stay_inside_the_support() {
    let (model, _, x) = common::perturbed_flow(3);
    let s = model.sample_obs(x.row(0), 5000, 1).unwrap();
    let sq = &model.spec.squash;
    for i in 0..s.rows() {
        for d in 0..s.cols() {
            assert!(s.get(i, d) > sq.lo[d] && s.get(i, d) < sq.hi[d]);
        }
    }
    let lp = model.log_prob_obs(&s, &x.select_rows(&[0])).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e6f64..1e6, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_text_round_trip(
        (thetas, obs) in (1usize..20).prop_flat_map(|n| (matrix(n, 2), matrix(n, 5))),
        seed in any::<u64>(),
        real in any::<bool>(),
    ) {
        let provenance = if real { Provenance::Real } else { Provenance::Simulated };
        let d = LabeledDataset::new("sir", provenance, SplitRole::CalibrationVal, seed, thetas, obs).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        prop_assert_eq!(LabeledDataset::read_from(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), layers in 1usize..4, hidden in 1usize..12) {
        let sim = TaskId::Sir.simulator();
        let m = FlowModel::new(FlowSpec::for_simulator(&sim, layers, &[hidden]), seed);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn coupling_dump_round_trip(c in (1usize..5, 1usize..5).prop_flat_map(|(n, m)| matrix(n, m)), tau in 0.3f64..1.0) {
        let rows: Vec<Vec<f64>> = (0..c.rows()).map(|i| c.row(i).iter().map(|v| v.abs() * 1e-6).collect()).collect();
        let sol = sinkhorn(&CostMatrix::from_rows(&rows).unwrap(), 0.5, tau).unwrap();
        let mut buf = Vec::new();
        sol.write_to(&mut buf).unwrap();
        let back = Coupling::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.p, &sol.p);
        prop_assert_eq!((back.gamma, back.tau, back.iterations, back.converged), (sol.gamma, sol.tau, sol.iterations, sol.converged));
    }
}
