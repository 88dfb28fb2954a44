//! Independent verification: brute-force loop oracles and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod oracle;

pub use gradcheck::{
    build_report, check_adaptive_layer, check_block, check_embedded_gaussian, check_network,
    gradcheck, relative_error, CoordSample, GradCheckReport, ParamCheck, DEFAULT_H,
    DEFAULT_TOLERANCE, MODEL_OPS, MODEL_OP_CHECKS,
};
pub use oracle::{oracle_embedded_gaussian, oracle_matrix_layer, oracle_vertexwise};
