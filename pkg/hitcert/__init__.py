# hitcert package
