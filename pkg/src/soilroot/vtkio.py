"""VTK XML writers for the soil mesh and the root network.

The soil mesh is written as an unstructured grid of polyhedral cells
(VTK cell type 42 with explicit face streams, valid for hexahedra,
tetrahedra and carved cells alike) with point data such as the pressure
head and cell data such as the reconstructed Darcy velocity.  The root
network is written as a poly-data file of line cells with per-segment
attributes.  All files are ascii XML, deterministic, and independent of
dictionary iteration order.
"""

import numpy as np

_EZ = np.array([0.0, 0.0, 1.0])


def _fmt(values, per_line=6):
    """Ascii lines for a flat numeric array."""
    flat = np.asarray(values).ravel()
    out = []
    for i in range(0, len(flat), per_line):
        chunk = flat[i:i + per_line]
        out.append(" ".join(repr(float(v)) if isinstance(v, (float, np.floating))
                            else str(int(v)) for v in chunk))
    return "\n".join(out)


def _data_arrays(data, n_items):
    """<DataArray> blocks for a {name: array} dict; arrays may be (n,) or
    (n, k) with k components."""
    blocks = []
    for name in sorted(data):
        arr = np.asarray(data[name], dtype=float)
        if arr.shape[0] != n_items:
            raise ValueError(f"array {name!r} has {arr.shape[0]} entries, "
                             f"expected {n_items}")
        ncomp = 1 if arr.ndim == 1 else arr.shape[1]
        blocks.append(
            f'<DataArray type="Float64" Name="{name}" '
            f'NumberOfComponents="{ncomp}" format="ascii">\n'
            f"{_fmt(arr)}\n</DataArray>"
        )
    return "\n".join(blocks)


def write_vtu(path, mesh, point_data=None, cell_data=None):
    """Write a PolyMesh as a VTK XML unstructured grid of polyhedra."""
    point_data = point_data or {}
    cell_data = cell_data or {}
    npts = len(mesh.vertices)
    ncells = mesh.n_cells

    connectivity, offsets = [], []
    face_stream, face_offsets = [], []
    for c in range(ncells):
        vids = mesh.cell_vertex_ids(c)
        connectivity.extend(int(v) for v in vids)
        offsets.append(len(connectivity))
        stream = [len(mesh.cell_faces[c])]
        for f in mesh.cell_faces[c]:
            loop = mesh.faces[f]
            stream.append(len(loop))
            stream.extend(int(v) for v in loop)
        face_stream.extend(stream)
        face_offsets.append(len(face_stream))

    parts = [
        '<?xml version="1.0"?>',
        '<VTKFile type="UnstructuredGrid" version="1.0" byte_order="LittleEndian">',
        "<UnstructuredGrid>",
        f'<Piece NumberOfPoints="{npts}" NumberOfCells="{ncells}">',
        "<Points>",
        '<DataArray type="Float64" NumberOfComponents="3" format="ascii">',
        _fmt(mesh.vertices),
        "</DataArray>",
        "</Points>",
        "<Cells>",
        '<DataArray type="Int64" Name="connectivity" format="ascii">',
        _fmt(connectivity),
        "</DataArray>",
        '<DataArray type="Int64" Name="offsets" format="ascii">',
        _fmt(offsets),
        "</DataArray>",
        '<DataArray type="UInt8" Name="types" format="ascii">',
        _fmt([42] * ncells),
        "</DataArray>",
        '<DataArray type="Int64" Name="faces" format="ascii">',
        _fmt(face_stream),
        "</DataArray>",
        '<DataArray type="Int64" Name="faceoffsets" format="ascii">',
        _fmt(face_offsets),
        "</DataArray>",
        "</Cells>",
        "<PointData>",
        _data_arrays(point_data, npts),
        "</PointData>",
        "<CellData>",
        _data_arrays(cell_data, ncells),
        "</CellData>",
        "</Piece>",
        "</UnstructuredGrid>",
        "</VTKFile>",
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(p for p in parts if p != ""))
        fh.write("\n")


def cell_velocity(space, Z, K_fun=None, gravity=True):
    """Piecewise-constant Darcy velocity -K(P0 psi)(P0 grad psi + e_z).

    ``K_fun`` maps pressure head to conductivity (defaults to 1); with
    ``gravity`` off the driving gradient is the pressure head alone.
    """
    mesh = space.mesh
    out = np.zeros((mesh.n_cells, 3))
    for c in range(mesh.n_cells):
        psi0 = space.eval_projected(c, Z, mesh.cell_centroid[c][None, :])[0]
        g = space.eval_gradient(c, Z)
        if gravity:
            g = g + _EZ
        K = float(K_fun(np.array([psi0]))[0]) if K_fun is not None else 1.0
        out[c] = -K * g
    return out


def write_network_vtp(path, network, segment_data=None):
    """Write the root network as VTK poly-data lines.

    ``segment_data`` maps array names to {segment id: value} dicts or to
    arrays ordered by sorted segment id.  An empty network produces a valid
    file with zero lines.
    """
    segment_data = segment_data or {}
    sids = sorted(network.segments)
    pts = (np.stack(network.nodes) if network.nodes
           else np.zeros((0, 3)))
    conn, offs = [], []
    for sid in sids:
        seg = network.segments[sid]
        conn.extend((seg.a, seg.b))
        offs.append(len(conn))

    cdata = {}
    for name, vals in segment_data.items():
        if isinstance(vals, dict):
            cdata[name] = np.array([vals[s] for s in sids], dtype=float)
        else:
            arr = np.asarray(vals, dtype=float)
            if len(arr) != len(sids):
                raise ValueError(f"array {name!r} length mismatch")
            cdata[name] = arr

    parts = [
        '<?xml version="1.0"?>',
        '<VTKFile type="PolyData" version="1.0" byte_order="LittleEndian">',
        "<PolyData>",
        f'<Piece NumberOfPoints="{len(pts)}" NumberOfVerts="0" '
        f'NumberOfLines="{len(sids)}" NumberOfStrips="0" NumberOfPolys="0">',
        "<Points>",
        '<DataArray type="Float64" NumberOfComponents="3" format="ascii">',
        _fmt(pts),
        "</DataArray>",
        "</Points>",
        "<Lines>",
        '<DataArray type="Int64" Name="connectivity" format="ascii">',
        _fmt(conn),
        "</DataArray>",
        '<DataArray type="Int64" Name="offsets" format="ascii">',
        _fmt(offs),
        "</DataArray>",
        "</Lines>",
        "<CellData>",
        _data_arrays(cdata, len(sids)),
        "</CellData>",
        "</Piece>",
        "</PolyData>",
        "</VTKFile>",
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(p for p in parts if p != ""))
        fh.write("\n")
