//! Allocation-only building blocks of the DLF extreme image codec.
//!
//! Everything in this crate is deterministic integer or `f64` arithmetic with
//! no I/O, so encoder and decoder builds always agree bit for bit:
//!
//! * [`range_coder`]: 32-bit range coder over 16-bit integer CDF tables.
//! * [`cdf`]: conversion of probability mass functions into coder tables.
//! * [`laplace`]: discretized Laplace symbol distributions and rate estimates.
//! * [`schedule`]: the four-group quadtree coding order for detail symbols.
//! * [`packing`]: fixed-length packing of semantic codebook indices.
//! * [`container`]: the `DLF1` bitstream container.
//! * [`image`]: planar RGB images and replication padding.
//! * [`metrics`]: PSNR and MS-SSIM.
//! * [`bdrate`]: Bjøntegaard delta rate between two RD curves.
#![no_std]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod bdrate;
pub mod cdf;
pub mod container;
pub mod image;
pub mod laplace;
pub mod metrics;
pub mod packing;
pub mod range_coder;
pub mod schedule;

pub use bdrate::{bd_rate, BdRateError, Orientation, RdSample};
pub use cdf::{CdfError, CdfTable, PRECISION_BITS, TOTAL_FREQ};
pub use container::{BitContainer, ContainerError, HEADER_LEN, MAGIC, VERSION};
pub use image::{pad_to_multiple, Image, ImageError, ImagePlane};
pub use laplace::{estimate_rate, index_symbol, symbol_index, Laplace, ALPHABET_SIZE, P_MIN, SYMBOL_MAX};
pub use metrics::{ms_ssim, psnr, MetricError, PSNR_CAP_DB};
pub use packing::{bits_per_index, pack_indices, unpack_indices, PackError};
pub use range_coder::{range_decode, range_encode, CoderError, RangeDecoder, RangeEncoder};
pub use schedule::{group_of, quadtree_schedule, CodingSchedule, GROUP_COUNT};
