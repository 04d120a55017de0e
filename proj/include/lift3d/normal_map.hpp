#pragma once

#include "lift3d/camera.hpp"
#include "lift3d/image.hpp"

namespace lift3d {

// Camera-space normals from a rendered depth map: each pixel back-projects
// to p = depth * (u, v, 1) on the pinhole frustum (camera looks along +z),
// tangents come from central differences (one-sided at borders), and the
// normal is the unit cross product oriented toward the camera (n_z <= 0).
// Degenerate tangents fall back to (0, 0, -1).
ImageBuffer depth_normal_map(const ImageBuffer& depth, const Camera& cam);

// Reverse pass: given d(loss)/d(normal map), returns d(loss)/d(depth).
ImageBuffer depth_normal_map_backward(const ImageBuffer& depth, const Camera& cam, const ImageBuffer& d_normals);

}  // namespace lift3d
