//! Deterministic random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by the
//! run seed and selected by `(iteration, phase, index)`. Draws therefore do
//! not depend on evaluation order, and serial or parallel execution produce
//! the same results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which part of the algorithm a substream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Phase {
    RowDraw = 0,
    ColumnDraw = 1,
    RowRepair = 2,
    ColumnRepair = 3,
    InitColumns = 4,
    InitRows = 5,
    KMeans = 6,
    SampleSeeds = 7,
    Datagen = 8,
    Experiment = 9,
}

const INDEX_BITS: u32 = 32;
const PHASE_BITS: u32 = 4;

/// Builds the substream for `(iteration, phase, index)` under `seed`.
///
/// `index` must fit in 32 bits and `iteration` in 28 bits.
pub fn substream(seed: u64, iteration: u64, phase: Phase, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << INDEX_BITS));
    debug_assert!(iteration < (1 << (64 - INDEX_BITS - PHASE_BITS)));
    let stream = (iteration << (INDEX_BITS + PHASE_BITS)) | ((phase as u64) << INDEX_BITS) | index;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
