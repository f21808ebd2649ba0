//! Hounsfield-unit windowing into a stacked three-channel image.

use serde::{Deserialize, Serialize};

use super::{CtSlice, DataError};
use crate::tensor::Tensor;

/// A display window: values in `[center - width/2, center + width/2]` map to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self, DataError> {
        if !(width > 0.0 && width.is_finite() && center.is_finite()) {
            return Err(DataError::Invalid(format!(
                "window ({center}, {width}) needs a finite positive width"
            )));
        }
        Ok(Self { center, width })
    }
}

/// Brain, subdural and bone-ish soft tissue windows.
pub const DEFAULT_WINDOWS: [WindowSpec; 3] = [
    WindowSpec { center: 40.0, width: 80.0 },
    WindowSpec { center: 80.0, width: 200.0 },
    WindowSpec { center: 40.0, width: 380.0 },
];

pub fn window_value(hu: f64, w: WindowSpec) -> f64 {
    ((hu - (w.center - w.width / 2.0)) / w.width).clamp(0.0, 1.0)
}

/// Rescales stored values to HU and windows them into `[rows, cols, 3]`.
pub fn hu_window_stack(slice: &CtSlice, windows: &[WindowSpec; 3]) -> Result<Tensor, DataError> {
    slice.validate()?;
    for w in windows {
        WindowSpec::new(w.center, w.width)?;
    }
    let n = slice.rows * slice.cols;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let hu = slice.hu(i);
        data.extend(windows.iter().map(|&w| window_value(hu, w)));
    }
    Tensor::new(vec![slice.rows, slice.cols, 3], data).map_err(|e| DataError::Invalid(e.to_string()))
}
