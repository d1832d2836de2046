//! From point annotations to blockwise counts, bins and a `.bcm` file.
//!
//! ```bash
//! cargo run --example quantize_annotations
//! ```

use zipcount::blockgrid::{
    bcm_total, decode_expectation, default_bins, make_grid, one_hot_positive, points_to_count_map,
    read_bcm, write_bcm, AnnotationSet, ProbMap,
};

fn main() -> zipcount::Result<()> {
    // A 100x75 image: the grid pads it to the next multiple of the block.
    let grid = make_grid(75, 100, 16)?;
    println!(
        "image 100x75, block 16 -> grid {}x{} (padded image {}x{})",
        grid.grid_h,
        grid.grid_w,
        grid.padded_w(),
        grid.padded_h()
    );

    let ann = AnnotationSet {
        image_h: 75,
        image_w: 100,
        points: vec![
            [17.2, 3.0],
            [18.0, 3.5],
            [18.4, 9.9],
            [70.0, 40.0],
            [99.5, 74.5],
        ],
    };
    let map = points_to_count_map(&ann, &grid)?;
    println!("\ncount map ({} heads total):", map.total());
    for row in map.counts.rows() {
        println!("  {:?}", row.to_vec());
    }

    // The block-size-8 bin scheme {0},{1},{2},{3},[4,inf).
    let scheme = default_bins(8)?;
    println!("\nbins for r=8: {:?}", scheme.bins());
    println!("centers:      {:?}", scheme.centers());
    for v in [0u64, 3, 57] {
        println!("count {v:>3} -> bin {}", scheme.bin_of(v));
    }

    // One-hot targets over positive bins for the blocks with heads.
    let scheme16 = default_bins(16)?;
    let targets = one_hot_positive(&map, &scheme16);
    println!("\npositive blocks: {:?}", targets.coords);

    // A uniform positive-bin distribution decodes to the center mean.
    let n_pos = scheme16.n_positive();
    let probs = ndarray::Array3::from_elem((n_pos, grid.grid_h, grid.grid_w), 1.0 / n_pos as f64);
    let decoded = decode_expectation(&ProbMap::new(grid, probs)?, &scheme16)?;
    println!(
        "uniform positive-bin decode: {:.4} per block",
        decoded[(0, 0)]
    );

    // Round-trip the count map through the binary format.
    let dir = std::env::temp_dir().join("zipcount_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("quantize_annotations.bcm");
    write_bcm(&path, &map.to_tensor())?;
    let back = read_bcm(&path)?;
    println!(
        "\nwrote {} ({} bytes), total after round-trip: {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        bcm_total(&back)
    );
    Ok(())
}
