//! Moving-average smoothing of normalized commands.
//!
//! The buffer is a fixed-size ring that starts zero-filled, so the first
//! N cycles after startup are deliberately damped (soft start). The mean
//! always divides by the full capacity, never by the number of pushes.

use nalgebra::Vector2;

use crate::geometry::NormalizedCommand;

/// Ring buffer of the last N normalized commands.
#[derive(Clone, Debug)]
pub struct MavgBuffer {
    slots: Vec<(Vector2<f64>, f64)>,
    write_index: usize,
}

impl MavgBuffer {
    /// Creates a zero-filled buffer of the given capacity.
    ///
    /// Panics if `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "filter capacity must be at least 1");
        Self {
            slots: vec![(Vector2::zeros(), 0.0); capacity],
            write_index: 0,
        }
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Replaces the oldest slot with the given command.
    pub fn push(&mut self, cmd: &NormalizedCommand) {
        self.slots[self.write_index] = (cmd.direction, cmd.rotation);
        self.write_index = (self.write_index + 1) % self.slots.len();
    }

    /// Componentwise arithmetic mean over all N slots (zeros included).
    pub fn mean(&self) -> (Vector2<f64>, f64) {
        let n = self.slots.len() as f64;
        let mut dir = Vector2::zeros();
        let mut rot = 0.0;
        for (d, r) in &self.slots {
            dir += d;
            rot += r;
        }
        (dir / n, rot / n)
    }

    /// Raw slot contents in ring order, oldest first.
    pub fn slots(&self) -> impl Iterator<Item = &(Vector2<f64>, f64)> {
        let (tail, head) = self.slots.split_at(self.write_index);
        head.iter().chain(tail.iter())
    }
}
