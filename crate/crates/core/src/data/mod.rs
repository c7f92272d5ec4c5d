//! Dataset ingestion, splitting, preprocessing and augmentation.

mod augment;
mod manifest;
mod preprocess;
mod split;
mod tensor;

pub use augment::{adjust_brightness, adjust_contrast, adjust_saturation, augment};
pub use manifest::{
    build_manifest, read_manifest, relative_to, resolve_data_path, write_manifest, ManifestBuild,
    SampleRecord, SkipReport, Source, Split,
};
pub use preprocess::{
    load_and_preprocess, load_mask, load_unit_image, preprocess_unit, Normalization, PreprocessConfig,
    Preprocessed,
};
pub use split::split_manifest;
pub use tensor::{FloodMask, ImageTensor, ValueDomain};
