//! Progressive enlargement of filtrations with a thin random time and a
//! discrete mark.
//!
//! Two backends share the vocabulary of cells `C_n^k`, conditional cell
//! probabilities `z^{n,k}` and the γ-entropy of the pair (mark, time):
//!
//! * [`lattice`], [`thin_time`] and [`enlargement`] work on an exact finite
//!   tree, where every conditional expectation is an enumeration;
//! * [`path_engine`] and [`market`] simulate continuous martingale models on
//!   a fine grid and estimate the same quantities by Monte Carlo.

pub mod enlargement;
pub mod fixtures;
pub mod lattice;
pub mod market;
pub mod path_engine;
pub mod stats;
pub mod thin_time;

pub use lattice::{AdaptedProcess, LatticeError, RandomVariable, RawProcess, StoppingTimeMap, TreeModel};
pub use thin_time::{CellLabel, EntropyReport, ThinTimeError, ThinTimeModel};
