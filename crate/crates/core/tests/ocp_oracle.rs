//! Local problems on linear models are convex QCQPs; their solutions must match
//! a general-purpose conic solver applied to the dense formulation.

mod common;

use common::dense_qp::{arb_instance, check_instance};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn local_problem_matches_dense_oracle(inst in arb_instance()) {
        check_instance(&inst)?;
    }
}
