# Kernel driver: one JSON request per stdin line, one JSON reply per line on
# the protocol channel. User code runs in a single persistent namespace.
import ast
import builtins
import contextlib
import hashlib
import io
import json
import math
import os
import re
import signal
import sys
import traceback
import types

_proto = os.fdopen(os.dup(1), "w", encoding="utf-8")
# fd-level writes from user code must never reach the protocol channel
os.dup2(2, 1)

TOOLKIT_NAME = "_eui"
BINDING_PREFIX = "__eui_"

_ns = {"__name__": "__main__", "__builtins__": builtins}
_toolkit = None
_executing = False


def _on_sigint(signum, frame):
    if _executing:
        raise KeyboardInterrupt


signal.signal(signal.SIGINT, _on_sigint)


class Unrepresentable(Exception):
    pass


def _scalar(value):
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise Unrepresentable("non-finite float")
        return value
    item = getattr(value, "item", None)
    if callable(item):
        try:
            return _scalar(item())
        except Unrepresentable:
            raise
        except Exception:
            pass
    raise Unrepresentable(type(value).__name__)


def to_sync(value):
    if isinstance(value, (list, tuple)):
        return [_scalar(v) for v in value]
    return _scalar(value)


def _visible_names():
    for name in _ns:
        if name == TOOLKIT_NAME:
            continue
        if name.startswith("__") and not name.startswith(BINDING_PREFIX):
            continue
        yield name


def _safe_repr(value):
    try:
        return repr(value)
    except Exception:
        return "<unreprable %s>" % type(value).__name__


def op_digest(req):
    pairs = sorted((n, _safe_repr(_ns[n])) for n in _visible_names())
    data = json.dumps(pairs, ensure_ascii=True).encode("utf-8")
    return {"ok": True, "digest": hashlib.sha256(data).hexdigest()}


def op_list_globals(req):
    prefix = req.get("prefix") or ""
    names = sorted(n for n in _visible_names() if n.startswith(prefix))
    return {"ok": True, "names": names}


def _get(name):
    if name not in _ns or name == TOOLKIT_NAME:
        return {"ok": False, "error": "UnknownGlobal", "message": name}
    try:
        return {"ok": True, "value": to_sync(_ns[name])}
    except Unrepresentable as e:
        return {"ok": False, "error": "UnrepresentableValue", "message": "%s: %s" % (name, e)}


def op_get_global(req):
    return _get(req["name"])


def op_get_globals(req):
    return {"ok": True, "values": [_get(name) for name in req["names"]]}


def op_set_global(req):
    _ns[req["name"]] = req["value"]
    return {"ok": True}


def _exec_cell(code):
    tree = ast.parse(code, filename="<cell>", mode="exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        last = ast.Expression(tree.body.pop().value)
    exec(compile(tree, "<cell>", "exec"), _ns)
    if last is not None:
        return eval(compile(last, "<cell>", "eval"), _ns)
    return None


def op_execute(req):
    global _executing
    out, err = io.StringIO(), io.StringIO()
    reply = {"ok": True, "error": None, "value_repr": None, "interrupted": False}
    try:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            _executing = True
            try:
                value = _exec_cell(req["code"])
            finally:
                _executing = False
        if value is not None:
            reply["value_repr"] = _safe_repr(value)
    except KeyboardInterrupt:
        reply["ok"] = False
        reply["interrupted"] = True
        reply["error"] = {"type": "KeyboardInterrupt", "message": "execution interrupted", "traceback": ""}
    except BaseException as e:
        reply["ok"] = False
        reply["error"] = {
            "type": type(e).__name__,
            "message": str(e),
            "traceback": "".join(traceback.format_exception(type(e), e, e.__traceback__)),
        }
    reply["stdout"] = out.getvalue()
    reply["stderr"] = err.getvalue()
    return reply


def op_compile(req):
    try:
        compile(req["code"], "<cell>", "exec", dont_inherit=True)
    except SyntaxError as e:
        return {"ok": False, "line": e.lineno, "message": e.msg}
    except ValueError as e:
        return {"ok": False, "line": None, "message": str(e)}
    return {"ok": True}


def op_toolkit_reset(req):
    _toolkit._reset()
    return {"ok": True}


def op_toolkit_state(req):
    widgets = []
    for entry in _toolkit._registry:
        entry = dict(entry)
        got = _get(entry["binding"])
        entry["value"] = got.get("value")
        entry["value_error"] = None if got["ok"] else got["error"]
        widgets.append(entry)
    return {"ok": True, "widgets": widgets}


# --- binding rewrite -------------------------------------------------------

class RewriteError(Exception):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


def _const(node, kind):
    if isinstance(node, ast.Constant) and isinstance(node.value, kind) and not isinstance(node.value, bool):
        return node.value
    return None


def _constructor_calls(tree, kinds):
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        func = node.func
        if isinstance(func, ast.Attribute) and func.attr in kinds and isinstance(func.value, ast.Name):
            yield node


def _arg(call, index, keyword):
    for kw in call.keywords:
        if kw.arg == keyword:
            return kw.value
    if len(call.args) > index:
        return call.args[index]
    return None


class _Edits:
    def __init__(self, source):
        parts = source.split("\n")
        self.lines = [p + "\n" for p in parts[:-1]] + [parts[-1]]
        self.edits = []

    def add(self, node, text):
        self.edits.append((node.lineno, node.col_offset, node.end_lineno, node.end_col_offset, text))

    def add_span(self, lineno, start, end, text):
        self.edits.append((lineno, start, lineno, end, text))

    def apply(self):
        lines = [l.encode("utf-8") for l in self.lines]
        for (l0, c0, l1, c1, text) in sorted(set(self.edits), reverse=True):
            if l0 != l1:
                head = lines[l0 - 1][:c0]
                tail = lines[l1 - 1][c1:]
                lines[l0 - 1:l1] = [head + text.encode("utf-8") + tail]
            else:
                line = lines[l0 - 1]
                lines[l0 - 1] = line[:c0] + text.encode("utf-8") + line[c1:]
        return b"".join(lines).decode("utf-8")


def _rename(source, tree, mapping, binding_nodes):
    edits = _Edits(source)
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id in mapping:
            edits.add(node, mapping[node.id])
        elif isinstance(node, ast.Global) or isinstance(node, ast.Nonlocal):
            raw = edits.lines[node.lineno - 1].encode("utf-8")
            segment = raw[node.col_offset:node.end_col_offset].decode("utf-8")
            def sub(m):
                return mapping.get(m.group(0), m.group(0))
            renamed = re.sub(r"[A-Za-z_][A-Za-z0-9_]*", sub, segment)
            edits.add_span(node.lineno, node.col_offset, node.end_col_offset, renamed)
    for node in binding_nodes:
        edits.add(node, json.dumps(mapping[node.value]))
    return edits.apply()


def _declared(tree):
    names = []
    for stmt in tree.body:
        targets = []
        if isinstance(stmt, ast.Assign):
            targets = stmt.targets
        elif isinstance(stmt, (ast.AnnAssign, ast.AugAssign)):
            targets = [stmt.target]
        for target in targets:
            elts = target.elts if isinstance(target, (ast.Tuple, ast.List)) else [target]
            for elt in elts:
                if isinstance(elt, ast.Name):
                    names.append(elt.id)
    return names


def _parse(code, label):
    try:
        return ast.parse(code, filename="<%s>" % label)
    except SyntaxError as e:
        raise RewriteError("%s snippet: %s" % (label, e.msg), e.lineno)


def op_rewrite_bindings(req):
    kinds = set(req["kinds"])
    widgets_src, globals_src = req["widgets"], req["globals"]
    try:
        widgets_tree = _parse(widgets_src, "widgets")
        globals_tree = _parse(globals_src, "globals")
        mapping, by_id, binding_nodes = {}, {}, []
        for call in _constructor_calls(widgets_tree, kinds):
            id_node = _arg(call, 0, "element_id")
            name_node = _arg(call, 2, "binding")
            element_id = _const(id_node, int) if id_node is not None else None
            name = _const(name_node, str) if name_node is not None else None
            if element_id is None or name is None:
                raise RewriteError(
                    "%s() call must pass literal element_id and binding" % call.func.attr, call.lineno)
            target = BINDING_PREFIX + str(element_id)
            if mapping.get(name, target) != target:
                raise RewriteError("binding %r is used by more than one element" % name, call.lineno)
            if element_id in by_id:
                raise RewriteError("element %d has more than one constructor" % element_id, call.lineno)
            mapping[name] = target
            by_id[element_id] = target
            binding_nodes.append(name_node)
        new_globals = _rename(globals_src, globals_tree, mapping, [])
        new_widgets = _rename(widgets_src, widgets_tree, mapping, binding_nodes)
        declared = _declared(ast.parse(new_globals))
    except RewriteError as e:
        return {"ok": False, "line": e.line, "message": str(e)}
    return {
        "ok": True,
        "globals": new_globals,
        "widgets": new_widgets,
        "bindings": {str(k): v for k, v in sorted(by_id.items())},
        "declared": declared,
    }


# --- main loop -------------------------------------------------------------

def op_init(req):
    global _toolkit
    memory_mb = req.get("memory_mb")
    if memory_mb:
        try:
            import resource
            limit = int(memory_mb) * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
        except Exception:
            pass
    module = types.ModuleType(TOOLKIT_NAME)
    exec(compile(req["toolkit"], "<%s>" % TOOLKIT_NAME, "exec"), module.__dict__)
    module._ns = _ns
    sys.modules[TOOLKIT_NAME] = module
    _ns[TOOLKIT_NAME] = module
    _toolkit = module
    return {"ok": True, "pid": os.getpid(), "python": sys.version.split()[0]}


OPS = {
    "init": op_init,
    "execute": op_execute,
    "compile": op_compile,
    "digest": op_digest,
    "list_globals": op_list_globals,
    "get_global": op_get_global,
    "get_globals": op_get_globals,
    "set_global": op_set_global,
    "toolkit_reset": op_toolkit_reset,
    "toolkit_state": op_toolkit_state,
    "rewrite_bindings": op_rewrite_bindings,
}


def main():
    stdin = sys.stdin.buffer
    while True:
        try:
            line = stdin.readline()
        except KeyboardInterrupt:
            continue
        if not line:
            break
        try:
            req = json.loads(line.decode("utf-8"))
            op = req.get("op")
            if op == "shutdown":
                _proto.write(json.dumps({"ok": True}) + "\n")
                _proto.flush()
                break
            handler = OPS.get(op)
            reply = handler(req) if handler else {"ok": False, "error": "UnknownOp", "message": str(op)}
        except KeyboardInterrupt:
            reply = {"ok": False, "error": "Interrupted", "message": "interrupted outside execution"}
        except Exception as e:
            reply = {"ok": False, "error": "DriverError", "message": "%s: %s" % (type(e).__name__, e)}
        _proto.write(json.dumps(reply, allow_nan=False) + "\n")
        _proto.flush()


main()
