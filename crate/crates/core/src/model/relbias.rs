//! Bucket assignment for relative position biases.
//!
//! Text pairs use log-spaced buckets over the signed offset. Pairs inside
//! one image use one bucket per exact (row offset, column offset). Every
//! other pair (image and text, or the two images of a pair) shares a
//! single cross-segment bucket.

use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Image1,
    Image2,
    Text,
}

/// Bucket of a text offset `key - query`.
///
/// Bidirectional tables spend half the buckets on each sign. Small
/// distances get their own bucket; larger ones share log-spaced buckets up
/// to `max_distance`, beyond which everything lands in the last bucket.
pub fn text_bucket(offset: i64, bidirectional: bool, buckets: usize, max_distance: usize) -> u32 {
    let mut n = -offset;
    let mut nb = buckets as i64;
    let mut base = 0i64;
    if bidirectional {
        nb /= 2;
        if n < 0 {
            base += nb;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = nb / 2;
    if n < max_exact {
        return (base + n) as u32;
    }
    let ratio = math::ln(n as f64 / max_exact as f64) / math::ln(max_distance as f64 / max_exact as f64);
    let large = max_exact + (ratio * (nb - max_exact) as f64) as i64;
    (base + large.min(nb - 1)) as u32
}

/// Table layout for a fused (concatenated) sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedBuckets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_buckets: usize,
    pub max_distance: usize,
}

impl FusedBuckets {
    pub fn image_buckets(&self) -> usize {
        (2 * self.grid_h - 1) * (2 * self.grid_w - 1)
    }

    pub fn cross_bucket(&self) -> u32 {
        (self.image_buckets() + self.text_buckets) as u32
    }

    pub fn table_rows(&self) -> usize {
        self.image_buckets() + self.text_buckets + 1
    }

    /// Segment label of every position for `n_img` grids followed by
    /// `text_len` tokens.
    pub fn segments(&self, n_img: usize, text_len: usize) -> Vec<Segment> {
        let g = self.grid_h * self.grid_w;
        let mut s = Vec::with_capacity(n_img * g + text_len);
        for i in 0..n_img {
            let seg = if i == 0 { Segment::Image1 } else { Segment::Image2 };
            s.extend(core::iter::repeat_n(seg, g));
        }
        s.extend(core::iter::repeat_n(Segment::Text, text_len));
        s
    }

    /// Row-major bucket matrix for all (query, key) pairs.
    pub fn build(&self, n_img: usize, text_len: usize) -> Vec<u32> {
        let segs = self.segments(n_img, text_len);
        let n = segs.len();
        let mut out = Vec::with_capacity(n * n);
        for (qi, &qs) in segs.iter().enumerate() {
            for (ki, &ks) in segs.iter().enumerate() {
                out.push(self.bucket(qi, qs, ki, ks));
            }
        }
        out
    }

    fn bucket(&self, qi: usize, qs: Segment, ki: usize, ks: Segment) -> u32 {
        if qs != ks {
            return self.cross_bucket();
        }
        if qs == Segment::Text {
            let off = ki as i64 - qi as i64;
            return self.image_buckets() as u32 + text_bucket(off, true, self.text_buckets, self.max_distance);
        }
        let g = self.grid_h * self.grid_w;
        let (qc, kc) = (qi % g, ki % g);
        let dr = (kc / self.grid_w) as i64 - (qc / self.grid_w) as i64;
        let dc = (kc % self.grid_w) as i64 - (qc % self.grid_w) as i64;
        ((dr + self.grid_h as i64 - 1) * (2 * self.grid_w as i64 - 1) + dc + self.grid_w as i64 - 1) as u32
    }
}
