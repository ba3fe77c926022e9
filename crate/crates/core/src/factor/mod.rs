//! Factor storage and the kernels every update is built from: block layouts,
//! the sparse square-root state, Givens QR, permutation and triangular solves.

pub mod checkpoint;
pub mod layout;
pub mod measurement;
pub mod permute;
pub mod qr;
pub mod solve;
pub mod state;
pub mod stats;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use layout::{Block, BlockKey, BlockKind, BlockLayout, StateOrdering};
pub use measurement::{MeasurementBlock, MeasurementRow, MeasurementTag};
pub use permute::{permute_and_retriangularize, PermutationPlan};
pub use qr::{qr_eliminate, ColumnOrder, EliminationResult, Natural, StackRow, ZERO_PIVOT_TOL};
pub use solve::{back_substitute, forward_substitute_transpose, UpperTriangular};
pub use state::{NewBlock, SquareRootState};
pub use stats::{sparsity_stats, SparsityStats};
