import numpy as np
import pytest

from v2sreg.datagen import icosphere
from v2sreg.geom import TriangleMesh, compute_vertex_normals


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_icosphere_mesh(radius=10.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    verts, faces = icosphere(subdivisions)
    mesh = TriangleMesh(vertices=verts * radius + np.asarray(center), faces=faces)
    mesh.normals, _ = compute_vertex_normals(mesh.vertices, mesh.faces)
    return mesh


def unit_cube_mesh():
    # 8 corners, 12 triangles, outward winding
    verts = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                     dtype=np.float64)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # x = 0, outward -x
        [4, 6, 7], [4, 7, 5],  # x = 1, outward +x
        [0, 4, 5], [0, 5, 1],  # y = 0
        [2, 3, 7], [2, 7, 6],  # y = 1
        [0, 2, 6], [0, 6, 4],  # z = 0
        [1, 5, 7], [1, 7, 3],  # z = 1
    ], dtype=np.int64)
    return TriangleMesh(vertices=verts, faces=faces)
