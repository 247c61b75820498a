//! Stochastic autoregressive image modeling.
//!
//! Images are cut into patches and predicted one patch at a time in a random
//! order. A content stream (encoder) sees each token plus everything earlier
//! in the order; a query stream (decoder) sees only the token's position plus
//! the earlier content, and its output regresses the patch pixels.

pub mod checkpoint;
pub mod cli;
pub mod imageio;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod patching;
pub mod permutation;
pub mod probes;
pub mod rng;
pub mod trainer;
