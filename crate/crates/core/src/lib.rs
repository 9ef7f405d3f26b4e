//! Synthetic-image detection by fusing three class-specialised feature
//! extractors.
//!
//! Three "base models" are each trained on a 90:10 subset dominated by one
//! class (REAL, GAN or DM), frozen, and stripped of their classifier. Their
//! pooled feature vectors are stacked as a three-channel sequence and
//! classified by a small 1D-convolutional head trained with class-weighted
//! cross-entropy.

pub mod backbone;
pub mod basemodel;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod train;
