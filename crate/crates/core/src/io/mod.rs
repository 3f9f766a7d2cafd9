//! File formats and synthetic data.

mod checkpoint;
mod cube_file;
mod model_file;
mod scene;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use cube_file::{decode_cube, encode_cube, read_cube, write_cube, CubeHeader, Dtype, CUBE_MAGIC, LAYOUT};
pub use model_file::{model_from_json, model_to_json, read_model, write_model};
pub use scene::{generate_scene, SceneSpec, SyntheticScene, ENDMEMBERS};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| crate::Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
