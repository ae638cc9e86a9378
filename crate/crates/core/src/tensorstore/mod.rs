//! Binary tensor container, model geometry, and calibration trace schema.

mod format;
mod trace;

pub use format::{
    read_tensor_file, write_tensor_file, DType, Metadata, Tensor, TensorData, TensorFile, FORMAT_VERSION, MAGIC,
};
pub use trace::{load_trace_set, LayerTrace, ModelGeometry, TraceRecord, TraceSet};
