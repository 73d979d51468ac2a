# main.py
import sys

from core.config import Settings

if __name__ == "__main__":
    # 'python main.py server' starts the HTTP service, anything else is a CLI command.
    if len(sys.argv) > 1 and sys.argv[1] == "server":
        import uvicorn

        settings = Settings.from_env()
        print(f"[SERVER] Starting rdmulti service on {settings.host}:{settings.port}", file=sys.stderr)
        uvicorn.run("server:app", host=settings.host, port=settings.port)
    else:
        import cli

        sys.exit(cli.main(sys.argv[1:]))
