# Widget toolkit preloaded into every kernel as `_eui`. Each constructor
# registers one manifest entry plus the HTML fragment that renders it.
import html as _html
import json as _json

KINDS = (
    "slider",
    "dropdown",
    "checkbox",
    "color_picker",
    "textbox",
    "number_input",
    "image_gallery",
)

_ns = None
_registry = []


def _reset():
    del _registry[:]


def _current(binding):
    if _ns is None:
        return None
    return _ns.get(binding)


def _esc(value):
    return _html.escape(str(value), quote=True)


def _num(value):
    return _json.dumps(value)


def _check_common(element_id, label, binding):
    if not isinstance(element_id, int) or isinstance(element_id, bool) or element_id <= 0:
        raise ValueError("element_id must be a positive integer")
    if not isinstance(label, str) or not label.strip():
        raise ValueError("label must be a non-empty string")
    if not isinstance(binding, str) or not binding:
        raise ValueError("binding must be a global variable name")


def _check_range(min, max, step):
    for name, v in (("min", min), ("max", max), ("step", step)):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("%s must be a number" % name)
    if not min < max:
        raise ValueError("min must be less than max")
    if not step > 0:
        raise ValueError("step must be positive")


def _open(kind, element_id, binding, description):
    title = ' title="%s"' % _esc(description) if description else ""
    return '<div class="eui-widget eui-%s" data-eui-id="%d" data-eui-kind="%s" data-eui-binding="%s"%s>' % (
        kind.replace("_", "-"), element_id, kind, _esc(binding), title)


def _label(element_id, label):
    return '<label for="eui-%d">%s</label>' % (element_id, _esc(label))


def _register(kind, element_id, label, binding, description, body, options=None, range=None):
    _registry.append({
        "element_id": element_id,
        "widget_kind": kind,
        "label": label,
        "binding": binding,
        "description": description or "",
        "options": options,
        "range": range,
        "html": _open(kind, element_id, binding, description) + body + "</div>",
    })


def slider(element_id, label, binding, min=0, max=100, step=1, description=""):
    _check_common(element_id, label, binding)
    _check_range(min, max, step)
    value = _current(binding)
    body = _label(element_id, label) + (
        '<input id="eui-%d" type="range" min="%s" max="%s" step="%s" value="%s">'
        '<output for="eui-%d">%s</output>'
    ) % (element_id, _num(min), _num(max), _num(step), _esc(_num(value)), element_id, _esc(_num(value)))
    _register("slider", element_id, label, binding, description, body,
              range={"min": min, "max": max, "step": step})


def number_input(element_id, label, binding, min=0, max=100, step=1, description=""):
    _check_common(element_id, label, binding)
    _check_range(min, max, step)
    value = _current(binding)
    body = _label(element_id, label) + (
        '<input id="eui-%d" type="number" min="%s" max="%s" step="%s" value="%s">'
    ) % (element_id, _num(min), _num(max), _num(step), _esc(_num(value)))
    _register("number_input", element_id, label, binding, description, body,
              range={"min": min, "max": max, "step": step})


def dropdown(element_id, label, binding, options=(), description=""):
    _check_common(element_id, label, binding)
    options = [str(o) for o in options]
    if not options:
        raise ValueError("dropdown needs at least one option")
    value = _current(binding)
    items = "".join(
        '<option value="%s"%s>%s</option>' % (_esc(o), " selected" if o == value else "", _esc(o))
        for o in options
    )
    body = _label(element_id, label) + '<select id="eui-%d">%s</select>' % (element_id, items)
    _register("dropdown", element_id, label, binding, description, body, options=options)


def checkbox(element_id, label, binding, description=""):
    _check_common(element_id, label, binding)
    checked = " checked" if _current(binding) is True else ""
    body = '<input id="eui-%d" type="checkbox"%s>' % (element_id, checked) + _label(element_id, label)
    _register("checkbox", element_id, label, binding, description, body)


def color_picker(element_id, label, binding, description=""):
    _check_common(element_id, label, binding)
    value = _current(binding)
    body = _label(element_id, label) + '<input id="eui-%d" type="color" value="%s">' % (
        element_id, _esc(value if value is not None else "#000000"))
    _register("color_picker", element_id, label, binding, description, body)


def textbox(element_id, label, binding, placeholder="", description=""):
    _check_common(element_id, label, binding)
    value = _current(binding)
    body = _label(element_id, label) + '<input id="eui-%d" type="text" value="%s" placeholder="%s">' % (
        element_id, _esc(value if value is not None else ""), _esc(placeholder))
    _register("textbox", element_id, label, binding, description, body)


def image_gallery(element_id, label, binding, items=(), description=""):
    _check_common(element_id, label, binding)
    items = [str(i) for i in items]
    figures = "".join(
        '<figure><img src="%s" alt="%s"><figcaption>%s</figcaption></figure>' % (_esc(i), _esc(i), _esc(i))
        for i in items
    )
    body = '<span class="eui-gallery-label">%s</span><div class="eui-gallery" id="eui-%d">%s</div>' % (
        _esc(label), element_id, figures)
    _register("image_gallery", element_id, label, binding, description, body)
