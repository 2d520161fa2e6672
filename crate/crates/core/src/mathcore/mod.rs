//! Numerical primitives shared by every other module: probability vectors,
//! tempered softmax, cross-entropy, correlation/similarity matrices, the
//! seeded stream generator and the dense matrix file format.

pub(crate) mod matrix_io;
pub(crate) mod prob;
mod rng;
mod stats;

pub use matrix_io::{load_matrix, read_matrix, save_matrix, write_matrix, MATRIX_MAGIC};
pub use prob::{
    cross_entropy, entropy, log_floor_hits, softmax_into, softmax_t, LogitVec, ProbDist, LOG_FLOOR,
};
pub use rng::{RngAlgorithm, SeededRng};
pub use stats::{cosine_sim_matrix, pearson, pearson_corr_matrix, CorrMatrix};
