//! Fixed 256-entry segment color table, indexed by segment id modulo 256.
//! Golden-angle hue walk with alternating value/saturation tiers so nearby
//! ids stay distinguishable; entry 0 is black (unassigned).

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

pub fn palette() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, e) in table.iter_mut().enumerate().skip(1) {
        let hue = (i as f32 * 137.50776) % 360.0;
        let tier = i % 3;
        let (s, v) = match tier {
            0 => (0.85, 0.95),
            1 => (0.65, 0.80),
            _ => (0.95, 0.65),
        };
        *e = hsv_to_rgb(hue, s, v);
    }
    table
}

pub fn color_of(segment_id: u32) -> [u8; 3] {
    palette()[(segment_id % 256) as usize]
}
