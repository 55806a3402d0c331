//! Fixture builders shared by the benchmarks.

use occsynth_core::scene::Scenario;
use occsynth_core::SemanticGrid;

/// Recombine a decomposed scenario into the labeled grid a sensor stack
/// would hand over: static structure plus every agent stamped at t = 0.
pub fn relabel(scenario: &Scenario) -> SemanticGrid {
    let mut g = scenario.static_grid.clone();
    for a in &scenario.agents {
        let idx = g.rasterize_footprint(&a.pose_at(0.0), a.extent, a.z_base());
        g.stamp_indices(&idx, a.class);
    }
    g
}
