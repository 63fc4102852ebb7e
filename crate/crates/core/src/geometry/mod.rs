//! Polygons, rasterization, distance transforms and overlap metrics.

mod contour;
mod edt;
mod raster;

pub use contour::{pair_to_ground_truth, resample, segment_distance, segments_intersect, Contour, Point, MIN_EDGE};
pub use edt::{distance_transform, nearest_boundary, DistanceField};
pub use raster::{bresenham, draw_outline, mask_dice, mask_iou, outline, rasterize, Mask};
