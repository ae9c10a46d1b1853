"""Air-ground robot navigation: perception math, planner and simulator."""
