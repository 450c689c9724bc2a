//! Shape network (residual-recursive autoencoder) and rotation network.

mod arch;
mod checkpoint;
mod network;
mod types;

pub(crate) use types::is_roundoff;

pub use arch::{init_params, ArchConfig, BlockKind, Layout, LinearIdx, Params};
pub use checkpoint::{load_model, save_model, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{
    column_as, column_index, column_values, dense, embed_input, inverse_rr_module,
    rotation_forward, rr_module, shape_forward, BatchInput, BoundModel, Model, Prediction,
    Reconstructor, ShapeOutput, DEGENERACY_JITTER,
};
pub use types::{
    center_visible, orthonormality_error, random_rotation_rows, Camera, Frame2D, Representation, Shape3D,
    CENTERING_TOL,
};
