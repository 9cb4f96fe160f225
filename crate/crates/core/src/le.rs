//! Flat little-endian views of numeric slices. On little-endian targets these
//! are plain memory copies; big-endian targets swap per element.

use std::borrow::Cow;

pub(crate) fn as_bytes<T: bytemuck::Pod>(v: &[T]) -> Cow<'_, [u8]> {
    #[cfg(target_endian = "little")]
    {
        Cow::Borrowed(bytemuck::cast_slice(v))
    }
    #[cfg(target_endian = "big")]
    {
        let size = std::mem::size_of::<T>();
        let mut out = bytemuck::cast_slice::<T, u8>(v).to_vec();
        for chunk in out.chunks_mut(size) {
            chunk.reverse();
        }
        Cow::Owned(out)
    }
}

/// Copy `b` into a vector of `T`. `b.len()` must be a multiple of the
/// element size.
pub(crate) fn to_vec<T: bytemuck::Pod>(b: &[u8]) -> Vec<T> {
    #[cfg(target_endian = "little")]
    {
        bytemuck::pod_collect_to_vec(b)
    }
    #[cfg(target_endian = "big")]
    {
        let size = std::mem::size_of::<T>();
        let mut owned = b.to_vec();
        for chunk in owned.chunks_mut(size) {
            chunk.reverse();
        }
        bytemuck::pod_collect_to_vec(&owned)
    }
}
