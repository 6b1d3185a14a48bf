//! WMTS tile crawling into the embedding store.

mod crawl;
pub mod mock;

pub use crawl::{crawl, CrawlReport, CrawlSpec, IngestError, TileFailure};

/// Rows and columns of the EPSG:4326 geographic tile grid at `tile_matrix`:
/// two tiles wide at level 0, doubling in both directions per level.
pub fn grid_bounds(tile_matrix: u32) -> (u64, u64) {
    assert!(
        tile_matrix < 62,
        "tile matrix level {tile_matrix} is out of range"
    );
    (1u64 << tile_matrix, 1u64 << (tile_matrix + 1))
}
