from aiohttp import web
from web.retrieve_routes import routes

# =========================================
# 🚀 RETRIEVER APP
# =========================================


def make_web_app(index) -> web.Application:
    """Serve a local BM25 index over the remote-retriever protocol."""
    web_app = web.Application(client_max_size=1024 * 1024)
    web_app["index"] = index
    web_app.add_routes(routes)
    return web_app
