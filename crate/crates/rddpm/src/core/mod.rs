//! Shared value types: image tensors, deterministic RNG streams, PNG I/O.

mod io;
mod rng;
mod tensor;

pub use io::{load_mask_png, load_png, save_heatmap_png, save_png};
pub(crate) use io::{dynimage_to_tensor, gray_to_tensor, unit_to_byte};
pub use rng::RngState;
pub use tensor::{gaussian_like, vec_add_assign, vec_scale, ImageTensor};
