"""Reader/writer for the URDF subset used by the toolkit.

Grammar (everything else is rejected)::

    <robot name="...">
      <link name="link_<id>">
        <inertial>
          <mass value=".."/> <inertia value=".."/> <damping value=".."/>
        </inertial>
        <points count="n"> x y z ... </points>
      </link>
      <joint name=".." type="revolute|prismatic|fixed">
        <parent link="link_<id>"/> <child link="link_<id>"/>
        <origin xyz=".." rotvec=".."/> <axis xyz=".."/>
        <limit lower=".." upper=".."/>
      </joint>
    </robot>

``origin/xyz`` is a point on the joint line and ``rotvec`` the child mount
rotation (axis-angle), both in the parent link frame.  Emission is canonical:
links by id, joints by child id, reals with 9 significant digits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from xml.parsers import expat

import numpy as np

from artisim.scene.model import ArticulatedModel, Joint, Link, ModelError, canonicalize


class URDFError(ModelError):
    pass


@dataclass
class _Node:
    tag: str
    attrib: dict
    line: int
    children: list = field(default_factory=list)
    text: str = ""

    def where(self) -> str:
        name = self.attrib.get("name")
        label = f"<{self.tag} name={name!r}>" if name else f"<{self.tag}>"
        return f"line {self.line}: {label}"


def _parse_xml(text: str) -> _Node:
    parser = expat.ParserCreate()
    stack: list[_Node] = []
    root: list[_Node] = []

    def start(tag, attrib):
        node = _Node(tag, dict(attrib), parser.CurrentLineNumber)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    def chars(data):
        if stack:
            stack[-1].text += data

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise URDFError(f"malformed markup: {exc}") from exc
    return root[0]


_LINK_NAME = re.compile(r"^link_(\d+)$")


def _floats(node: _Node, attr: str, n: int) -> np.ndarray:
    raw = node.attrib.get(attr)
    if raw is None:
        raise URDFError(f"{node.where()}: missing attribute {attr!r}")
    try:
        vals = np.array([float(x) for x in raw.split()], dtype=float)
    except ValueError as exc:
        raise URDFError(f"{node.where()}: attribute {attr!r} is not numeric") from exc
    if vals.size != n:
        raise URDFError(f"{node.where()}: attribute {attr!r} needs {n} values, got {vals.size}")
    return vals


def _only(node: _Node, allowed: set[str]) -> dict[str, _Node]:
    out = {}
    for ch in node.children:
        if ch.tag not in allowed:
            raise URDFError(f"{ch.where()}: unknown element inside <{node.tag}>")
        if ch.tag in out:
            raise URDFError(f"{ch.where()}: duplicate <{ch.tag}>")
        out[ch.tag] = ch
    return out


def _need(children: dict[str, _Node], tag: str, parent: _Node) -> _Node:
    if tag not in children:
        raise URDFError(f"{parent.where()}: missing <{tag}>")
    return children[tag]


def _link_id(node: _Node, name: str) -> int:
    m = _LINK_NAME.match(name or "")
    if not m:
        raise URDFError(f"{node.where()}: link name {name!r} must look like 'link_<id>'")
    return int(m.group(1))


def _parse_link(node: _Node) -> Link:
    lid = _link_id(node, node.attrib.get("name"))
    ch = _only(node, {"inertial", "points"})
    inertial = _only(_need(ch, "inertial", node), {"mass", "inertia", "damping"})
    inode = ch["inertial"]
    mass = float(_floats(_need(inertial, "mass", inode), "value", 1)[0])
    inertia = float(_floats(_need(inertial, "inertia", inode), "value", 1)[0])
    damping = float(_floats(_need(inertial, "damping", inode), "value", 1)[0])
    pnode = _need(ch, "points", node)
    try:
        count = int(pnode.attrib.get("count", "-1"))
        vals = np.array([float(x) for x in pnode.text.split()], dtype=float)
    except ValueError as exc:
        raise URDFError(f"{pnode.where()}: malformed point payload") from exc
    if vals.size != 3 * count:
        raise URDFError(f"{pnode.where()}: count={count} but {vals.size} numbers given")
    try:
        return Link(lid, vals.reshape(-1, 3), mass, damping, inertia)
    except ModelError as exc:
        raise URDFError(f"{node.where()}: {exc}") from exc


def _parse_joint(node: _Node) -> Joint:
    jtype = node.attrib.get("type")
    if jtype not in ("revolute", "prismatic", "fixed"):
        raise URDFError(f"{node.where()}: unsupported joint type {jtype!r}")
    ch = _only(node, {"parent", "child", "origin", "axis", "limit"})
    parent = _need(ch, "parent", node)
    child = _need(ch, "child", node)
    pid = _link_id(parent, parent.attrib.get("link"))
    cid = _link_id(child, child.attrib.get("link"))
    origin = _need(ch, "origin", node)
    xyz = _floats(origin, "xyz", 3)
    rotvec = _floats(origin, "rotvec", 3)
    axis_node = _need(ch, "axis", node)
    axis = _floats(axis_node, "xyz", 3)
    n = np.linalg.norm(axis)
    if abs(n - 1.0) > 1e-6:
        raise URDFError(f"{axis_node.where()}: axis is not unit length (|axis| = {n:.9g})")
    if abs(n - 1.0) > 1e-9:
        axis = axis / n
    lim = _need(ch, "limit", node)
    lo = float(_floats(lim, "lower", 1)[0])
    hi = float(_floats(lim, "upper", 1)[0])
    try:
        return Joint(pid, cid, jtype, axis, xyz, rotvec, (lo, hi))
    except ModelError as exc:
        raise URDFError(f"{node.where()}: {exc}") from exc


def parse_urdf(text: str) -> ArticulatedModel:
    root = _parse_xml(text)
    if root.tag != "robot":
        raise URDFError(f"{root.where()}: document root must be <robot>")
    links, joints = [], []
    for ch in root.children:
        if ch.tag == "link":
            links.append(_parse_link(ch))
        elif ch.tag == "joint":
            joints.append(_parse_joint(ch))
        else:
            raise URDFError(f"{ch.where()}: unknown element <{ch.tag}>")
    try:
        return ArticulatedModel(root.attrib.get("name", ""), tuple(links), tuple(joints))
    except ModelError as exc:
        raise URDFError(f"{root.where()}: {exc}") from exc


def _fmt(x) -> str:
    v = float(x)
    if v == 0:
        v = 0.0
    return f"{v:.9g}"


def _vec(v) -> str:
    return " ".join(_fmt(x) for x in np.asarray(v).ravel())


def emit_urdf(model: ArticulatedModel) -> str:
    m = canonicalize(model)
    out = ['<?xml version="1.0"?>', f'<robot name="{_escape(m.name)}">']
    for lk in m.links:
        out.append(f'  <link name="link_{lk.id}">')
        out.append("    <inertial>")
        out.append(f'      <mass value="{_fmt(lk.mass)}"/>')
        out.append(f'      <inertia value="{_fmt(lk.inertia)}"/>')
        out.append(f'      <damping value="{_fmt(lk.damping)}"/>')
        out.append("    </inertial>")
        out.append(f'    <points count="{len(lk.points)}">')
        for p in lk.points:
            out.append(f"      {_vec(p)}")
        out.append("    </points>")
        out.append("  </link>")
    for j in m.joints:
        out.append(f'  <joint name="joint_{j.child}" type="{j.type}">')
        out.append(f'    <parent link="link_{j.parent}"/>')
        out.append(f'    <child link="link_{j.child}"/>')
        out.append(f'    <origin xyz="{_vec(j.origin)}" rotvec="{_vec(j.orientation)}"/>')
        out.append(f'    <axis xyz="{_vec(j.axis)}"/>')
        out.append(f'    <limit lower="{_fmt(j.limits[0])}" upper="{_fmt(j.limits[1])}"/>')
        out.append("  </joint>")
    out.append("</robot>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace('"', "&quot;").replace("<", "&lt;")
