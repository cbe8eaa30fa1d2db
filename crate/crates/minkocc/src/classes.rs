//! Semantic class palette: 18 classes, nuScenes naming and column order.
//!
//! Index 0 doubles as "unlabeled" in 2D pseudo-label images; index 17 is
//! free space in 3D grids and is excluded from mIoU.

pub const NUM_CLASSES: usize = 18;
pub const FREE_CLASS: i32 = 17;
pub const UNLABELED_2D: i32 = 0;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "drivable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
];

/// Display colors for rendered maps, one RGB triple per class.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],       // others
    [112, 128, 144], // barrier
    [220, 20, 60],   // bicycle
    [255, 127, 80],  // bus
    [255, 158, 0],   // car
    [233, 150, 70],  // construction_vehicle
    [255, 61, 99],   // motorcycle
    [0, 0, 230],     // pedestrian
    [47, 79, 79],    // traffic_cone
    [255, 140, 0],   // trailer
    [255, 99, 71],   // truck
    [0, 207, 191],   // drivable_surface
    [175, 0, 75],    // other_flat
    [75, 0, 75],     // sidewalk
    [112, 180, 60],  // terrain
    [222, 184, 135], // manmade
    [0, 175, 0],     // vegetation
    [255, 255, 255], // free
];

pub fn class_name(id: i32) -> &'static str {
    CLASS_NAMES
        .get(id as usize)
        .copied()
        .unwrap_or("unknown")
}

pub fn is_valid_class(id: i32) -> bool {
    (0..NUM_CLASSES as i32).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_complete_and_free_is_last() {
        assert_eq!(CLASS_NAMES.len(), 18);
        assert_eq!(CLASS_NAMES[FREE_CLASS as usize], "free");
        assert_eq!(CLASS_NAMES[4], "car");
        assert_eq!(CLASS_NAMES[7], "pedestrian");
        assert_eq!(CLASS_NAMES[10], "truck");
        assert_eq!(CLASS_NAMES[11], "drivable_surface");
        assert!(is_valid_class(0));
        assert!(is_valid_class(17));
        assert!(!is_valid_class(18));
        assert!(!is_valid_class(-1));
    }
}
