//! Reusable per-thread work buffers for the convolution kernels.

use std::any::Any;
use std::cell::RefCell;

use super::Scalar;

const POOL_SIZE: usize = 8;

thread_local! {
    static POOL: RefCell<Vec<Box<dyn Any>>> = const { RefCell::new(Vec::new()) };
}

/// A buffer of exactly `len` elements with unspecified contents.
pub(crate) fn take<T: Scalar>(len: usize) -> Vec<T> {
    let mut v = POOL
        .with(|pool| {
            let mut pool = pool.borrow_mut();
            // Smallest buffer that fits, else the largest, so capacities settle.
            let caps = pool
                .iter()
                .enumerate()
                .filter_map(|(i, b)| b.downcast_ref::<Vec<T>>().map(|v| (i, v.capacity())));
            let (i, _) = caps.min_by_key(|&(_, cap)| {
                if cap >= len {
                    (0, cap)
                } else {
                    (1, usize::MAX - cap)
                }
            })?;
            pool.swap_remove(i).downcast::<Vec<T>>().ok().map(|b| *b)
        })
        .unwrap_or_default();
    v.resize(len, T::zero());
    v
}

pub(crate) fn give<T: Scalar>(v: Vec<T>) {
    POOL.with(|pool| {
        let mut pool = pool.borrow_mut();
        if pool.len() < POOL_SIZE {
            pool.push(Box::new(v));
        }
    });
}
