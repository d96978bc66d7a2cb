"""BVH reading and writing (HIERARCHY/MOTION text format)."""

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParseError, TooShort, UnsupportedChannel
from .motion import Joint, MotionClip, Skeleton, clip_to_poses, extract_features

ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
KNOWN_CHANNELS = ROTATION_CHANNELS + POSITION_CHANNELS


@dataclass(eq=False)
class BvhDocument:
    skeleton: Skeleton
    channels: list            # per joint, list of channel names in declared order
    frames: np.ndarray        # N x C raw channel values (degrees / file units)
    frame_time: float
    end_sites: dict = field(default_factory=dict)   # joint index -> end offset

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64).reshape(-1, self.n_channels)
        if not self.frame_time > 0:
            raise ValueError("frame_time must be positive")

    @property
    def n_channels(self) -> int:
        return sum(len(c) for c in self.channels)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class _Tokens:
    """Whitespace tokenizer that remembers line and column of each token."""

    def __init__(self, text: str):
        self.items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            for m in re.finditer(r"\S+", line):
                self.items.append((m.group(), lineno, m.start() + 1))
        self.pos = 0
        self.last_line = self.items[-1][1] if self.items else 1

    def peek(self):
        return self.items[self.pos][0] if self.pos < len(self.items) else None

    def next(self, what: str = "token"):
        if self.pos >= len(self.items):
            raise ParseError(f"unexpected end of file, expected {what}", self.last_line)
        tok = self.items[self.pos]
        self.pos += 1
        return tok

    def expect(self, word: str):
        tok, line, col = self.next(repr(word))
        if tok != word:
            raise ParseError(f"expected {word!r}, found {tok!r}", line, col)

    def number(self, kind=float):
        tok, line, col = self.next("a number")
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"expected a number, found {tok!r}", line, col) from None


def parse_bvh(text) -> BvhDocument:
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    tk = _Tokens(text)
    tk.expect("HIERARCHY")
    names, parents, offsets, channels, end_sites = [], [], [], [], {}

    def read_joint(parent):
        tok, line, col = tk.next("joint name")
        idx = len(names)
        names.append(tok)
        parents.append(parent)
        tk.expect("{")
        tk.expect("OFFSET")
        offsets.append([tk.number() for _ in range(3)])
        chans = []
        if tk.peek() == "CHANNELS":
            tk.next()
            n = tk.number(int)
            for _ in range(n):
                c, cl, cc = tk.next("channel name")
                if c not in KNOWN_CHANNELS:
                    raise UnsupportedChannel(f"line {cl}, column {cc}: unknown channel {c!r}")
                chans.append(c)
        channels.append(chans)
        while True:
            tok, line, col = tk.next("'JOINT', 'End' or '}'")
            if tok == "}":
                return
            if tok == "JOINT":
                read_joint(idx)
            elif tok == "End":
                tk.expect("Site")
                tk.expect("{")
                tk.expect("OFFSET")
                end_sites[idx] = np.array([tk.number() for _ in range(3)])
                tk.expect("}")
            else:
                raise ParseError(f"unexpected token {tok!r}", line, col)

    tk.expect("ROOT")
    read_joint(None)
    tk.expect("MOTION")
    tk.expect("Frames:")
    n_frames = tk.number(int)
    tk.expect("Frame")
    tk.expect("Time:")
    frame_time = tk.number()
    n_ch = sum(len(c) for c in channels)
    values = []
    for f in range(n_frames):
        for _ in range(n_ch):
            if tk.peek() is None:
                raise ParseError(f"MOTION section truncated: expected {n_frames} frames of "
                                 f"{n_ch} values, frame {f} is incomplete", tk.last_line)
            values.append(tk.number())
    if tk.peek() is not None:
        _, line, col = tk.items[tk.pos]
        raise ParseError("trailing data after the last frame", line, col)
    joints = tuple(Joint(n, p, o) for n, p, o in zip(names, parents, offsets))
    skeleton = Skeleton(joints, 0, _infer_hip_height(joints, end_sites), names[0])
    return BvhDocument(skeleton, channels, np.array(values).reshape(n_frames, n_ch),
                       frame_time, end_sites)


def _infer_hip_height(joints, end_sites) -> float:
    pos = []
    for i, j in enumerate(joints):
        base = np.zeros(3) if j.parent is None else pos[j.parent]
        pos.append(base + (0 if j.parent is None else j.offset))
    lows = [p[1] for p in pos] + [pos[i][1] + e[1] for i, e in end_sites.items()]
    h = -min(lows)
    # a skeleton with nothing below its root (e.g. a single joint) gets unit height
    return h if h > 0 else 1.0


def write_bvh(doc: BvhDocument) -> str:
    sk = doc.skeleton
    out = ["HIERARCHY"]

    def emit(i, depth):
        pad = "  " * depth
        kind = "ROOT" if sk.joints[i].parent is None else "JOINT"
        out.append(f"{pad}{kind} {sk.joints[i].name}")
        out.append(pad + "{")
        out.append(pad + "  OFFSET " + " ".join(f"{v:.6f}" for v in sk.joints[i].offset))
        if doc.channels[i]:
            out.append(pad + f"  CHANNELS {len(doc.channels[i])} " + " ".join(doc.channels[i]))
        for c in sk.children(i):
            emit(c, depth + 1)
        if i in doc.end_sites:
            out.append(pad + "  End Site")
            out.append(pad + "  {")
            out.append(pad + "    OFFSET " + " ".join(f"{v:.6f}" for v in doc.end_sites[i]))
            out.append(pad + "  }")
        out.append(pad + "}")

    emit(sk.root_index, 0)
    out.append("MOTION")
    out.append(f"Frames: {doc.n_frames}")
    out.append(f"Frame Time: {doc.frame_time:.8f}")
    for row in doc.frames:
        out.append(" ".join(f"{v:.6f}" for v in row))
    return "\n".join(out) + "\n"


def read_bvh(path) -> BvhDocument:
    return parse_bvh(Path(path).read_text())


def save_bvh(doc: BvhDocument, path) -> None:
    Path(path).write_text(write_bvh(doc))


def _rotation_order(chans) -> str:
    return "".join(c[0] for c in chans if c in ROTATION_CHANNELS)


def bvh_to_clip(doc: BvhDocument, scale: float = 1.0) -> MotionClip:
    """Convert raw channels to features; ``scale`` maps file units to meters."""
    if doc.n_frames < 2:
        raise TooShort(f"need at least 2 frames, got {doc.n_frames}")
    N, J = doc.n_frames, doc.skeleton.n_joints
    rots = np.broadcast_to(np.eye(3), (N, J, 3, 3)).copy()
    root_pos = np.zeros((N, 3))
    col = 0
    for i, chans in enumerate(doc.channels):
        block = doc.frames[:, col:col + len(chans)]
        col += len(chans)
        rot_idx = [k for k, c in enumerate(chans) if c in ROTATION_CHANNELS]
        pos_idx = {c: k for k, c in enumerate(chans) if c in POSITION_CHANNELS}
        if pos_idx:
            if doc.skeleton.joints[i].parent is None:
                for axis, c in enumerate(POSITION_CHANNELS):
                    if c in pos_idx:
                        root_pos[:, axis] = block[:, pos_idx[c]] * scale
            else:
                warnings.warn(f"ignoring position channels on non-root joint "
                              f"{doc.skeleton.joints[i].name!r}", stacklevel=2)
        if rot_idx:
            order = _rotation_order(chans)
            rots[:, i] = Rotation.from_euler(order, block[:, rot_idx], degrees=True).as_matrix()
    skeleton = doc.skeleton.scaled(scale) if scale != 1.0 else doc.skeleton
    return extract_features(root_pos, rots, skeleton, fps=1.0 / doc.frame_time)


def clip_to_bvh(clip: MotionClip, order: str = "ZYX", scale: float = 1.0) -> BvhDocument:
    """Inverse of :func:`bvh_to_clip`; ``scale`` maps file units to meters."""
    root_pos, rots = clip_to_poses(clip)
    N, J = rots.shape[:2]
    euler = Rotation.from_matrix(rots.reshape(-1, 3, 3)).as_euler(order, degrees=True).reshape(N, J, 3)
    rot_names = [f"{a}rotation" for a in order]
    channels, cols = [], []
    for i, joint in enumerate(clip.skeleton.joints):
        if joint.parent is None:
            channels.append(list(POSITION_CHANNELS) + rot_names)
            cols.append(root_pos / scale)
        else:
            channels.append(list(rot_names))
        cols.append(euler[:, i])
    sk = clip.skeleton.scaled(1.0 / scale) if scale != 1.0 else clip.skeleton
    return BvhDocument(sk, channels, np.concatenate(cols, axis=1), 1.0 / clip.fps)


def load_clips(path, scale: float = 1.0) -> list[MotionClip]:
    """Clips from a BVH file or every ``*.bvh`` in a directory (sorted by name)."""
    p = Path(path)
    files = sorted(p.glob("*.bvh")) if p.is_dir() else [p]
    return [bvh_to_clip(read_bvh(f), scale) for f in files]
