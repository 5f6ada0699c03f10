//! Pairwise synthesis of concurrent programs from synchronization skeletons:
//! model checking of pair-programs, static and dynamic composition,
//! wait-for-graph deadlock analysis, simulation and a low-atomicity runtime.

pub mod corpus;
pub mod dynamic;
pub mod lowatom;
pub mod mc;
pub mod oracle;
pub mod overlay;
pub mod sexpr;
pub mod skeleton;
pub mod structure;
pub mod system;
pub mod waitfor;

pub use mc::{check, check_spec, closure, CheckOptions, Formula, Label, Labeling, Structure};
pub use overlay::{overlay, synthesize_static, ComposedMove, ComposedProcess};
pub use skeleton::{GuardExpr, GuardedCommand, LocalState, Pid, PropRef, SharedVar, SyncSkeleton};
pub use structure::{build_pair_structure, build_product_structure, JState, PairKey, PairProgram, StaticProgram};
