//! Warp the next frame of a moving-square clip back onto the current one and
//! print where the occlusion mask drops.

use tempseg::data::{generate_clip, SceneObject, SceneSpec, Shape};
use tempseg::flowwarp::{occlusion_mask, warp_backward};

fn main() -> tempseg::Result<()> {
    let spec = SceneSpec {
        width: 12,
        height: 8,
        classes: 2,
        background_class: 0,
        background_color: [0.1, 0.1, 0.1],
        objects: vec![SceneObject {
            shape: Shape::Square,
            class: 1,
            size: 3,
            origin: (2, 2),
            velocity: (2, 0),
            color: [0.9, 0.7, 0.2],
        }],
        noise: 0.0,
        flicker: 0.0,
        cast: [0.0; 3],
        anchor: 0,
    };
    let clip = generate_clip(&spec, 3, 0)?;
    // M_{0→1}: where each pixel of frame 0 lands in frame 1
    let flow = clip.flow_between(0, 1)?;
    let warped = warp_backward(&clip.frames[1], &flow)?;
    let mask = occlusion_mask(&clip.frames[0], &warped)?;

    println!("occlusion mask (. = 1, # = occluded):");
    for y in 0..spec.height {
        let row: String = (0..spec.width)
            .map(|x| {
                if mask.values()[y * spec.width + x] < 0.99 {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {row}");
    }
    let visible = mask.values().iter().filter(|v| **v >= 0.99).count();
    println!("{visible}/{} pixels fully visible", mask.values().len());
    Ok(())
}
