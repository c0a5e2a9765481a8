//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, the tape, loss construction, data handling and training.
#[derive(Debug)]
pub enum Error {
    /// Constructor data length does not match the product of the extents.
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    /// A shape contained a zero extent.
    ZeroExtent { shape: Vec<usize> },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Axis index is not valid for the operand rank.
    AxisOutOfRange { axis: usize, rank: usize },
    /// Channel count of a convolution input does not match the kernel.
    ChannelMismatch { input: usize, kernel: usize },
    /// Kernel does not fit inside the padded input.
    KernelTooLarge { kernel: usize, padded: usize },
    /// Convolution stride must be at least one.
    ZeroStride,
    /// `backward` was called on a non-scalar node.
    NonScalarRoot { shape: Vec<usize> },
    /// A class label lies outside `[0, classes)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// A gather index lies outside the axis extent.
    IndexOutOfRange { index: usize, extent: usize },
    /// Concat was called with no inputs.
    EmptyConcat,
    /// Channel assignment needs at least one channel per class.
    AssignmentInfeasible { channels: usize, classes: usize },
    /// A CWA mask length differs from the group it is applied to.
    MaskLengthMismatch { mask: usize, group: usize },
    /// The V2 diversity variant needs ground-truth labels.
    MissingLabels,
    /// A batch-level loss was called with an empty batch.
    EmptyBatch,
    /// The MC branch was requested without a mask set while CWA is enabled.
    MissingMasks,
    /// Gradient check found a NaN in the analytic or numeric gradient.
    NanInGradient { coordinate: usize },
    /// A finite-difference probe produced a NaN objective.
    NanInObjective { coordinate: usize },
    /// Model configuration collapses the spatial extent below the minimum.
    SpatialCollapse { extent: usize, minimum: usize },
    /// SE head input width does not match the feature channel count.
    HeadWidthMismatch { head: usize, channels: usize },
    /// Synthetic dataset geometry violates the placement bound.
    InfeasibleGeometry {
        parts_area: usize,
        budget: usize,
    },
    /// Could not place glyphs without overlap (should not happen within the bound).
    PlacementFailed { class: usize, sample: usize },
    /// Bad magic bytes in a tensor file.
    BadMagic { path: PathBuf, got: [u8; 4] },
    /// A tensor or dataset file ended early.
    Truncated {
        path: PathBuf,
        expected_bytes: u64,
        actual_bytes: u64,
    },
    /// A CSV or JSON artifact failed to parse.
    Malformed { path: PathBuf, detail: String },
    /// Training hit a non-finite loss.
    NonFiniteLoss { epoch: usize, iteration: usize },
    /// A parameter gradient contained NaN.
    NanGradient { param: String },
    /// Invalid run or loss configuration.
    Config(String),
    /// Underlying I/O failure.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeDataMismatch { shape, expected, got } => write!(
                f,
                "data length {got} does not match shape {shape:?} (expected {expected})"
            ),
            Error::ZeroExtent { shape } => write!(f, "shape {shape:?} has a zero extent"),
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::ChannelMismatch { input, kernel } => write!(
                f,
                "conv2d: input has {input} channels but kernel expects {kernel}"
            ),
            Error::KernelTooLarge { kernel, padded } => write!(
                f,
                "conv2d: kernel extent {kernel} exceeds padded input extent {padded}"
            ),
            Error::ZeroStride => write!(f, "conv2d: stride must be >= 1"),
            Error::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::IndexOutOfRange { index, extent } => {
                write!(f, "index {index} out of range for extent {extent}")
            }
            Error::EmptyConcat => write!(f, "concat needs at least one input"),
            Error::AssignmentInfeasible { channels, classes } => write!(
                f,
                "cannot assign {channels} channels to {classes} classes: each class needs at least one"
            ),
            Error::MaskLengthMismatch { mask, group } => {
                write!(f, "mask length {mask} does not match group size {group}")
            }
            Error::MissingLabels => write!(f, "the V2 diversity variant requires labels"),
            Error::EmptyBatch => write!(f, "batch must contain at least one sample"),
            Error::MissingMasks => {
                write!(f, "CWA is enabled but no mask set was supplied")
            }
            Error::NanInGradient { coordinate } => {
                write!(f, "NaN in gradient at coordinate {coordinate}")
            }
            Error::NanInObjective { coordinate } => {
                write!(f, "NaN objective while probing coordinate {coordinate}")
            }
            Error::SpatialCollapse { extent, minimum } => write!(
                f,
                "conv stack collapses spatial extent to {extent}, minimum is {minimum}"
            ),
            Error::HeadWidthMismatch { head, channels } => write!(
                f,
                "SE head expects {head} input channels but features have {channels}"
            ),
            Error::InfeasibleGeometry { parts_area, budget } => write!(
                f,
                "glyph area {parts_area} exceeds placement budget {budget} (parts_per_class * glyph_size^2 must be <= image_size^2 / 4)"
            ),
            Error::PlacementFailed { class, sample } => write!(
                f,
                "failed to place glyphs without overlap for class {class}, sample {sample}"
            ),
            Error::BadMagic { path, got } => write!(
                f,
                "{}: bad magic {:?}, expected \"MCT1\"",
                path.display(),
                got
            ),
            Error::Truncated { path, expected_bytes, actual_bytes } => write!(
                f,
                "{}: truncated, expected {expected_bytes} bytes but found {actual_bytes}",
                path.display()
            ),
            Error::Malformed { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
            Error::NonFiniteLoss { epoch, iteration } => write!(
                f,
                "non-finite loss at epoch {epoch}, iteration {iteration}"
            ),
            Error::NanGradient { param } => {
                write!(f, "NaN gradient for parameter \"{param}\"")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Io { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
