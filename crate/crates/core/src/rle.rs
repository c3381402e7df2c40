//! Run-length encoding of binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Runs over the mask's tight window in row-major order, alternating
/// false/true and starting with a (possibly zero-length) false run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[x0, y0, w, h]`
    pub window: [usize; 4],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(m: &BinaryMask) -> RleMask {
        let (x0, y0, w, h) = m.window();
        let mut counts = Vec::new();
        let mut cur = false;
        let mut run = 0u32;
        for &b in m.window_bits() {
            if b != cur {
                counts.push(run);
                run = 0;
                cur = b;
            }
            run += 1;
        }
        if w * h > 0 {
            counts.push(run);
        }
        RleMask { window: [x0, y0, w, h], counts }
    }

    pub fn decode(&self, width: usize, height: usize) -> Result<BinaryMask> {
        let [x0, y0, w, h] = self.window;
        if x0 + w > width || y0 + h > height {
            return Err(Error::Dataset(format!("rle window {:?} exceeds {width}x{height}", self.window)));
        }
        let mut bits = Vec::with_capacity(w * h);
        let mut cur = false;
        for &c in &self.counts {
            bits.extend(std::iter::repeat(cur).take(c as usize));
            cur = !cur;
        }
        if bits.len() != w * h {
            return Err(Error::Dataset(format!("rle covers {} cells, window has {}", bits.len(), w * h)));
        }
        BinaryMask::from_window_bits(width, height, (x0, y0, w, h), bits)
    }
}
